use dcdeblur::config::TrainConfig;
use dcdeblur::dark_channel::dark_channel_map;
use dcdeblur::data::{apply_blur, random_motion_kernel, BlurKernel};
use dcdeblur::metrics::{psnr, ssim};
use dcdeblur::{rng, Real, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64, lo: Real, hi: Real) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng::seeded(seed))
}

fn conv(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let mut t = Tape::new();
    let co = w.shape()[0];
    let (x, w, b) = (
        t.constant(x.clone()),
        t.constant(w.clone()),
        t.constant(Tensor::zeros(&[co])),
    );
    let y = t.conv2d(x, w, b, stride, w_pad(&t, w)).unwrap();
    t.value(y).clone()
}

fn w_pad(t: &Tape, w: dcdeblur::Var) -> usize {
    t.value(w).shape()[2] / 2
}

fn conv_t(y: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let mut t = Tape::new();
    let ci = w.shape()[1];
    let (y, w, b) = (
        t.constant(y.clone()),
        t.constant(w.clone()),
        t.constant(Tensor::zeros(&[ci])),
    );
    let x = t
        .conv_transpose2d(y, w, b, stride, w_pad(&t, w), stride - 1)
        .unwrap();
    t.value(x).clone()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Real {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64, k in prop::sample::select(vec![1usize, 3, 5])) {
        let x = tensor(&[2, 3, 8, 8], seed, -1.0, 1.0);
        let y = tensor(&[2, 3, 8, 8], seed ^ 1, -1.0, 1.0);
        let w = tensor(&[4, 3, k, k], seed ^ 2, -0.5, 0.5);
        let mixed = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv(&mixed, &w, 2);
        let rhs = conv(&x, &w, 2).zip_map(&conv(&y, &w, 2), |p, q| a * p + b * q).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn transposed_conv_is_the_adjoint(seed in any::<u64>(), stride in 1usize..3, k in prop::sample::select(vec![3usize, 5])) {
        let x = tensor(&[1, 3, 8, 8], seed, -1.0, 1.0);
        let w = tensor(&[4, 3, k, k], seed ^ 3, -0.5, 0.5);
        let cx = conv(&x, &w, stride);
        let y = tensor(cx.shape(), seed ^ 4, -1.0, 1.0);
        let ty = conv_t(&y, &w, stride);
        prop_assert_eq!(ty.shape(), x.shape());
        let (l, r) = (cx.dot(&y).unwrap(), x.dot(&ty).unwrap());
        prop_assert!((l - r).abs() < 1e-9 * (1.0 + l.abs()), "{} vs {}", l, r);
    }

    #[test]
    fn min_pool_gradient_routes_one_unit_per_output(seed in any::<u64>(), window in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let mut t = Tape::new();
        let x = t.variable(tensor(&[2, 3, 9, 7], seed, 0.0, 1.0));
        let m = t.min_pool_channels_window(x, window).unwrap();
        let s = t.sum(m);
        let outputs = t.value(m).len();
        let argmin = t.argmin(m).unwrap().to_vec();
        let g = t.backward(s).unwrap();
        let g = g.get(x).unwrap();
        prop_assert!((g.sum() - outputs as Real).abs() < 1e-12);
        let mut expected = vec![0.0; g.len()];
        for i in argmin {
            expected[i] += 1.0;
        }
        prop_assert_eq!(g.data(), expected.as_slice());
    }

    #[test]
    fn dark_channel_is_monotone(seed in any::<u64>(), window in prop::sample::select(vec![1usize, 3, 5])) {
        let x = tensor(&[1, 3, 10, 10], seed, 0.0, 0.8);
        let bump = tensor(&[1, 3, 10, 10], seed ^ 5, 0.0, 0.2);
        let y = x.zip_map(&bump, |a, b| a + b).unwrap();
        let dx = dark_channel_map(&x, window).unwrap().values;
        let dy = dark_channel_map(&y, window).unwrap().values;
        prop_assert!(dx.data().iter().zip(dy.data()).all(|(a, b)| a <= b));
        let wider = dark_channel_map(&x, window + 2).unwrap().values;
        prop_assert!(wider.data().iter().zip(dx.data()).all(|(a, b)| a <= b));
    }

    #[test]
    fn box_blur_respects_the_dilated_lower_bound(seed in any::<u64>(), k in prop::sample::select(vec![3usize, 5]), window in prop::sample::select(vec![1usize, 3, 5])) {
        let img = tensor(&[1, 3, 20, 20], seed, 0.0, 1.0);
        let blurred = apply_blur(&img, &BlurKernel::box_filter(k)).unwrap();
        let lhs = dark_channel_map(&blurred, window).unwrap().values;
        let rhs = dark_channel_map(&img, window + k - 1).unwrap().values;
        let m = window / 2 + k / 2;
        for y in m..20 - m {
            for x in m..20 - m {
                prop_assert!(lhs.at4(0, 0, y, x) >= rhs.at4(0, 0, y, x) - 1e-12);
            }
        }
    }

    #[test]
    fn motion_kernels_are_normalized(seed in any::<u64>(), length in 1.0..25.0f64) {
        let k = random_motion_kernel(length, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(k.taps.len(), k.size * k.size);
        prop_assert!(k.size % 2 == 1);
        prop_assert!(k.taps.iter().all(|&t| t >= 0.0));
        prop_assert!((k.taps.iter().sum::<Real>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>()) {
        let a = tensor(&[1, 3, 16, 16], seed, 0.0, 1.0);
        let b = tensor(&[1, 3, 16, 16], seed ^ 6, 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
    }

    #[test]
    fn config_dump_round_trips(lambda2 in 0.0..500.0f64, window in 0usize..10, seed in any::<u64>(), lr in 1e-6..1e-2f64) {
        let cfg = TrainConfig {
            lambda2,
            dc_window: 2 * window + 1,
            seed,
            lr,
            ..TrainConfig::default()
        };
        prop_assert_eq!(TrainConfig::parse(&cfg.dump()).unwrap(), cfg);
    }
}
