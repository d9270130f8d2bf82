//! The finite-difference gradient suite shared by the `gradcheck` command
//! and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    gradcheck, gradcheck_map, gradcheck_params_map, GradcheckOptions,
    GradcheckReport, ParamId, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE,
};
use crate::blocks::{ConvKind, ConvSite, Mrb, ResidualBlock};
use crate::error::Result;
use crate::losses::{record_total_loss, MindConfig};
use crate::network::{Network, NetworkConfig, Variant};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-5;
pub const NETWORK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: &'static str,
    pub max_rel_error: f64,
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Fills every parameter of `store` with N(0, std) draws, biases included.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for p in store.iter_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = std * (rng.random::<f64>() * 2.0 - 1.0) * 1.7);
    }
}

fn result(group: &'static str, name: &'static str, tol: f64, r: Result<GradcheckReport>) -> CheckResult {
    match r {
        Ok(r) => CheckResult {
            group,
            name,
            max_rel_error: r.max_rel_error,
            probes: r.probes,
            tolerance: tol,
            passed: r.max_rel_error < tol,
        },
        Err(_) => CheckResult {
            group,
            name,
            max_rel_error: f64::INFINITY,
            probes: 0,
            tolerance: tol,
            passed: false,
        },
    }
}

pub fn primitive_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions::default();
    let tol = PRIMITIVE_TOL;
    let mut out = Vec::new();
    let g = "primitive";

    // conv3d: input, kernel and bias.
    let x = random(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
    let w = random(&[3, 2, 3, 3, 3], &mut rng, -1.0, 1.0);
    let b = random(&[3], &mut rng, -1.0, 1.0);
    out.push(result(g, "conv3d", tol, gradcheck_map(&[x, w, b], &opts, |t, v| {
        t.conv3d(v[0], v[1], v[2])
    }, |_, _| false)));

    // Factorized site: both stages, all parameters and the input.
    let x = random(&[2, 4, 4, 4], &mut rng, -1.0, 1.0);
    let pw = random(&[3, 2, 1, 3, 3], &mut rng, -1.0, 1.0);
    let pb = random(&[3], &mut rng, -1.0, 1.0);
    let dw = random(&[3, 3, 3, 1, 1], &mut rng, -1.0, 1.0);
    let db = random(&[3], &mut rng, -1.0, 1.0);
    out.push(result(g, "f3d_conv", tol, gradcheck_map(&[x, pw, pb, dw, db], &opts, |t, v| {
        let y = t.conv3d(v[0], v[1], v[2])?;
        t.conv3d(y, v[3], v[4])
    }, |_, _| false)));

    let x = random(&[2, 3, 3, 4], &mut rng, -1.0, 1.0);
    let near_zero: Vec<usize> = (0..x.numel()).filter(|&i| x.data()[i].abs() < 1e-4).collect();
    out.push(result(
        g,
        "leaky_relu",
        tol,
        gradcheck_map(
            &[x],
            &opts,
            |t, v| t.leaky_relu(v[0], LEAKY_SLOPE),
            |_, j| near_zero.contains(&j),
        ),
    ));

    // Distinct values: a shuffled ramp.
    let n = 2 * 4 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 11.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 4, 4, 4], vals).expect("shape");
    out.push(result(g, "max_pool2", tol, gradcheck_map(&[x], &opts, |t, v| {
        t.max_pool2(v[0])
    }, |_, _| false)));

    let x = random(&[2, 3, 2, 4], &mut rng, -1.0, 1.0);
    out.push(result(g, "upsample_trilinear2", tol, gradcheck_map(&[x], &opts, |t, v| {
        t.upsample_trilinear2(v[0])
    }, |_, _| false)));

    let a = random(&[1, 3, 3, 3], &mut rng, -1.0, 1.0);
    let b = random(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
    out.push(result(g, "concat_channels", tol, gradcheck_map(&[a, b], &opts, |t, v| {
        t.concat_channels(v[0], v[1])
    }, |_, _| false)));

    let a = random(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
    let b = random(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
    out.push(result(g, "add", tol, gradcheck_map(&[a, b], &opts, |t, v| {
        t.add(v[0], v[1])
    }, |_, _| false)));

    // Warp: sample points inside the grid with fractional parts in
    // [0.1, 0.9], away from the trilinear kinks.
    let shape = [4usize, 5, 6];
    let nv = 120;
    let img = random(&[1, 4, 5, 6], &mut rng, 0.0, 1.0);
    let field: Vec<f64> = (0..3 * nv)
        .map(|k| {
            let (a, i) = (k / nv, k % nv);
            let pos = [i / 30, (i / 6) % 5, i % 6][a] as f64;
            let cell = rng.random_range(0..shape[a] - 1) as f64;
            cell + rng.random_range(0.1..0.9) - pos
        })
        .collect();
    let field = Tensor::from_vec(&[3, 4, 5, 6], field).expect("shape");
    out.push(result(g, "warp", tol, gradcheck_map(&[field], &opts, |t, v| {
        t.warp(&img, v[0])
    }, |_, _| false)));

    let x = random(&[1, 6, 6, 6], &mut rng, 0.05, 0.95);
    let cfg = MindConfig::default();
    out.push(result(g, "mind", tol, gradcheck_map(&[x], &opts, |t, v| {
        t.mind(v[0], &cfg)
    }, |_, _| false)));

    let u = random(&[3, 4, 5, 3], &mut rng, -2.0, 2.0);
    out.push(result(g, "smoothness", tol, gradcheck(&[u], &opts, |t, v| t.smoothness(v[0]))));

    out
}

fn all_probes(store: &ParamStore<f64>) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).value.numel()).map(move |j| (id, j)))
        .collect()
}

fn sample_probes(store: &ParamStore<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let all = all_probes(store);
    rand::seq::index::sample(rng, all.len(), k)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

pub fn block_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions::default();
    let tol = BLOCK_TOL;
    let g = "block";
    let mut out = Vec::new();

    for (name, kind) in [
        ("residual_block", ConvKind::Regular),
        ("residual_block_f3d", ConvKind::Factorized),
    ] {
        let mut store = ParamStore::<f64>::new();
        let rb = ResidualBlock::new(&mut store, "rb", 4, kind).expect("valid block");
        randomize(&mut store, &mut rng, 0.3);
        let z = random(&[4, 4, 4, 4], &mut rng, -1.0, 1.0);
        let input_check = gradcheck_map(
            std::slice::from_ref(&z),
            &opts,
            |t, v| rb.apply(t, &store, v[0]),
            |_, _| false,
        );
        let probes = sample_probes(&store, 40, &mut rng);
        let param_check = gradcheck_params_map(&store, &probes, opts.eps, 10, |t, s| {
            let zv = t.constant(z.clone());
            rb.apply(t, s, zv)
        });
        out.push(result(g, name, tol, worst(input_check, param_check)));
    }

    let mut store = ParamStore::<f64>::new();
    let mrb = Mrb::new(&mut store, "mrb", 1, 4, 4, 4, ConvKind::Regular).expect("valid block");
    randomize(&mut store, &mut rng, 0.3);
    let l = random(&[4, 8, 8, 8], &mut rng, -1.0, 1.0);
    let h = random(&[4, 4, 4, 4], &mut rng, -1.0, 1.0);
    let probes = sample_probes(&store, 40, &mut rng);
    // Both outputs, one at a time.
    let mut checks = Vec::new();
    for want_l in [true, false] {
        let pick = |t: &mut Tape<f64>, s: &ParamStore<f64>, lv: Var, hv: Var| -> Result<Var> {
            let o = mrb.apply(t, s, lv, hv, !want_l)?;
            Ok(if want_l { o.l } else { o.h.expect("requested") })
        };
        checks.push(gradcheck_map(
            &[l.clone(), h.clone()],
            &opts,
            |t, v| pick(t, &store, v[0], v[1]),
            |_, _| false,
        ));
        checks.push(gradcheck_params_map(&store, &probes, opts.eps, 11, |t, s| {
            let lv = t.constant(l.clone());
            let hv = t.constant(h.clone());
            pick(t, s, lv, hv)
        }));
    }
    let mrb_check = checks.into_iter().reduce(worst).expect("four checks");
    out.push(result(g, "mrb", tol, mrb_check));

    let mut store = ParamStore::<f64>::new();
    let site = ConvSite::new(&mut store, "site", 3, 4, 3, ConvKind::Factorized).expect("valid site");
    randomize(&mut store, &mut rng, 0.5);
    let x = random(&[3, 4, 4, 4], &mut rng, -1.0, 1.0);
    let probes = all_probes(&store);
    out.push(result(
        g,
        "f3d_site_params",
        tol,
        gradcheck_params_map(&store, &probes, opts.eps, 13, |t, s| {
            let xv = t.constant(x.clone());
            site.apply(t, s, xv)
        }),
    ));
    out
}

fn worst(
    a: Result<GradcheckReport>,
    b: Result<GradcheckReport>,
) -> Result<GradcheckReport> {
    let (a, b) = (a?, b?);
    let mut r = if a.max_rel_error >= b.max_rel_error { a.clone() } else { b.clone() };
    r.probes = a.probes + b.probes;
    Ok(r)
}

/// Full training loss of a 16³, N = 2 network, probed at five random
/// parameter entries.
pub fn network_check(seed: u64) -> CheckResult {
    let tol = NETWORK_TOL;
    let run = || -> Result<GradcheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::build(&NetworkConfig::new(2, Variant::Mrb, seed))?;
        // Full-scale final kernel: the near-zero production init would shrink
        // upstream gradients towards the finite-difference noise floor.
        net.init_weights_with_head_std(seed, None);
        let store = net.params().cast::<f64>();
        let moving = random(&[1, 16, 16, 16], &mut rng, 0.0, 1.0);
        let fixed = random(&[1, 16, 16, 16], &mut rng, 0.0, 1.0);
        let cfg = MindConfig::default();
        let fixed_mind = {
            let mut t = Tape::<f64>::new();
            let f = t.constant(fixed.clone());
            let m = t.mind(f, &cfg)?;
            t.value(m).clone()
        };
        let probes = sample_probes(&store, 5, &mut rng);
        gradcheck_params_map(&store, &probes, 1e-6, seed, |t, s| {
            let m = t.constant(moving.clone());
            let f = t.constant(fixed.clone());
            let phi = net.forward_on(t, s, m, f)?;
            record_total_loss(t, &moving, &fixed_mind, phi, 1.5, &cfg)
        })
    };
    result("network", "full_network_16", tol, run())
}

/// Every check of the suite.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut all = primitive_checks(seed);
    all.extend(block_checks(seed));
    all.push(network_check(seed));
    all
}
