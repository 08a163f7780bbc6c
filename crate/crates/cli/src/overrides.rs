//! One `--<key> <value>` flag per config key.

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use dcdeblur::config::{TrainConfig, KEYS};

/// Config keys given on the command line, in key order.
#[derive(Clone, Debug, Default)]
pub struct Overrides(pub Vec<(String, String)>);

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> dcdeblur::Result<()> {
        for (key, value) in &self.0 {
            cfg.set(key, value)
                .map_err(|e| dcdeblur::Error::Config(format!("--{key}: {e}")))?;
        }
        Ok(())
    }
}

impl FromArgMatches for Overrides {
    fn from_arg_matches(matches: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Overrides(
            KEYS.iter()
                .filter_map(|(key, _)| {
                    matches
                        .get_one::<String>(key)
                        .map(|v| (key.to_string(), v.clone()))
                })
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, matches: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(matches)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        KEYS.iter()
            .fold(cmd.next_help_heading("Config keys"), |cmd, (key, help)| {
                cmd.arg(
                    Arg::new(*key)
                        .long(*key)
                        .value_name("VALUE")
                        .allow_negative_numbers(true)
                        .help(*help),
                )
            })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
