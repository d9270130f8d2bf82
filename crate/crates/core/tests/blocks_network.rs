use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use f3rnet::autodiff::{gradcheck_map, with_exec_mode, ExecMode, GradcheckOptions};
use f3rnet::blocks::{site_param_count, ConvKind, ConvSite, Mrb, ResidualBlock};
use f3rnet::network::{Network, NetworkConfig, Region, Variant};
use f3rnet::volgrid::Volume;
use f3rnet::{ParamStore, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn fill_random(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = scale * rng.random_range(-1.0..1.0));
    }
}

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Volume::new(shape, [1.0; 3], (0..n).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn residual_output_minus_input_is_the_branch() {
    let mut store = ParamStore::<f64>::new();
    let rb = ResidualBlock::new(&mut store, "rb", 3, ConvKind::Regular).unwrap();
    fill_random(&mut store, 1, 0.3);
    let z = random(&[3, 4, 4, 4], 2);
    let mut t = Tape::new();
    let zv = t.input(z.clone());
    let y = rb.apply(&mut t, &store, zv).unwrap();
    let r = rb.branch(&mut t, &store, zv).unwrap();
    for ((y, z), r) in t.value(y).data().iter().zip(z.data()).zip(t.value(r).data()) {
        assert!((y - z - r).abs() < 1e-14);
    }
}

#[test]
fn residual_block_gradcheck() {
    let mut store = ParamStore::<f64>::new();
    let rb = ResidualBlock::new(&mut store, "rb", 4, ConvKind::Regular).unwrap();
    fill_random(&mut store, 3, 0.3);
    let z = random(&[4, 4, 4, 4], 4);
    let r = gradcheck_map(&[z], &GradcheckOptions::default(), |t, v| rb.apply(t, &store, v[0]), |_, _| false)
        .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn factorized_site_with_identity_stages_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let site = ConvSite::new(&mut store, "s", 2, 2, 3, ConvKind::Factorized).unwrap();
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        if shape.len() == 5 {
            // Centre tap on the channel diagonal.
            let taps: usize = shape[2..].iter().product();
            for c in 0..2 {
                p.value.data_mut()[(c * 2 + c) * taps + taps / 2] = 1.0;
            }
        }
    }
    let x = random(&[2, 3, 4, 5], 5);
    let mut t = Tape::new();
    let xv = t.input(x.clone());
    let y = site.apply(&mut t, &store, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn factorized_site_is_not_a_regular_convolution() {
    let mut fs = ParamStore::<f64>::new();
    let f = ConvSite::new(&mut fs, "f", 2, 2, 3, ConvKind::Factorized).unwrap();
    fill_random(&mut fs, 6, 0.5);
    let mut rs = ParamStore::<f64>::new();
    let r = ConvSite::new(&mut rs, "r", 2, 2, 3, ConvKind::Regular).unwrap();
    fill_random(&mut rs, 7, 0.5);
    let x = random(&[2, 4, 4, 4], 8);
    let mut t = Tape::new();
    let xv = t.input(x);
    let a = f.apply(&mut t, &fs, xv).unwrap();
    let b = r.apply(&mut t, &rs, xv).unwrap();
    let diff = t
        .value(a)
        .data()
        .iter()
        .zip(t.value(b).data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-3);
    assert_eq!(site_param_count(16, 16, 3, ConvKind::Regular), 6928);
    assert_eq!(site_param_count(16, 16, 3, ConvKind::Factorized), 3104);
}

#[test]
fn mrb_with_zero_bottleneck_keeps_the_stream_and_has_the_right_shapes() {
    let mut store = ParamStore::<f32>::new();
    let mrb = Mrb::new(&mut store, "m", 1, 16, 16, 16, ConvKind::Factorized).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bottleneck = mrb.bottleneck.param_ids();
    for id in store.ids().collect::<Vec<_>>() {
        if !bottleneck.contains(&id) {
            let p = store.get_mut(id);
            p.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
    }
    let l = random(&[16, 32, 32, 32], 10).cast::<f32>();
    let h = random(&[16, 16, 16, 16], 11).cast::<f32>();
    let mut t = Tape::new();
    let (lv, hv) = (t.input(l.clone()), t.input(h));
    let out = mrb.apply(&mut t, &store, lv, hv, true).unwrap();
    assert_eq!(t.value(out.l), &l);
    assert_eq!(t.value(out.h.unwrap()).shape(), &[16, 16, 16, 16]);
}

#[test]
fn mrb_rejects_mismatched_scales() {
    let mut store = ParamStore::<f64>::new();
    let mrb = Mrb::new(&mut store, "m", 1, 4, 4, 4, ConvKind::Regular).unwrap();
    let mut t = Tape::new();
    let l = t.input(Tensor::zeros(&[4, 8, 8, 8]));
    let h = t.input(Tensor::zeros(&[4, 8, 8, 8]));
    assert!(mrb.apply(&mut t, &store, l, h, true).is_err());
}

#[test]
fn variants_map_to_the_expected_sites() {
    let plain = Network::build(&NetworkConfig::new(2, Variant::WoF3d, 0)).unwrap();
    assert!(plain.sites().iter().all(|s| s.kind == ConvKind::Regular));
    let mrb = Network::build(&NetworkConfig::new(2, Variant::Mrb, 0)).unwrap();
    let extra: std::collections::BTreeSet<String> = mrb
        .sites()
        .iter()
        .filter(|s| s.name.starts_with("extra"))
        .map(|s| s.name.split('.').next().unwrap().to_string())
        .collect();
    assert_eq!(extra.len(), 2);
    assert!(mrb.sites().iter().any(|s| s.region == Region::Decoder));
    for v in Variant::ALL {
        let net = Network::build(&NetworkConfig::new(2, v, 0)).unwrap();
        assert_eq!(net.audit(), Ok(()), "{v}");
        let mut names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total, "{v}: duplicate parameter names");
    }
}

#[test]
fn shape_divisibility_follows_depth() {
    let cfg = NetworkConfig::new(4, Variant::Mrb, 0);
    assert!(cfg.check_shape([144, 144, 128]).is_ok());
    assert!(cfg.check_shape([100, 100, 100]).is_err());
}

#[test]
fn factorizing_any_region_strictly_reduces_the_count() {
    for depth in 2..=4 {
        let count = |v| Network::build(&NetworkConfig::new(depth, v, 0)).unwrap().count_parameters();
        let base = count(Variant::WoF3d);
        for v in [Variant::Enc, Variant::Dec, Variant::Fr, Variant::Ms, Variant::WF3d] {
            assert!(count(v) < base, "N={depth} {v}");
        }
        // Every factorizable site is factorized, so the network cannot do
        // better than the per-site ratio plus its small unfactorized remainder.
        let ratio = count(Variant::WF3d) as f64 / base as f64;
        assert!(ratio < 0.46, "N={depth}: {ratio}");
        assert!(count(Variant::Mrb) > count(Variant::WF3d));
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = Network::build(&NetworkConfig::new(2, Variant::Enc, 17)).unwrap();
    let b = Network::build(&NetworkConfig::new(2, Variant::Enc, 17)).unwrap();
    let c = Network::build(&NetworkConfig::new(2, Variant::Enc, 18)).unwrap();
    let values = |n: &Network| n.params().iter().flat_map(|p| p.value.data().to_vec()).collect::<Vec<f32>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn fresh_network_predicts_a_tiny_asymmetric_field() {
    let net = Network::build(&NetworkConfig::new(4, Variant::Mrb, 3)).unwrap();
    let a = random_volume([48, 48, 48], 1);
    let b = random_volume([48, 48, 48], 2);
    let phi = with_exec_mode(ExecMode::Serial, || net.register(&a, &b)).unwrap();
    assert_eq!(phi.shape(), [48, 48, 48]);
    assert_eq!(phi.data().len(), 3 * 48 * 48 * 48);
    assert!(phi.max_magnitude() < 1e-2, "{}", phi.max_magnitude());
    let again = with_exec_mode(ExecMode::Serial, || net.register(&a, &b)).unwrap();
    assert_eq!(phi, again);
    let swapped = net.register(&b, &a).unwrap();
    assert_ne!(phi, swapped);
}
