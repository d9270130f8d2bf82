use f3rnet::metrics::{asd, dice, evaluate_pair, jacobian_stats, EvalReport};
use f3rnet::volgrid::{DisplacementField, LabelMask};

type Shape = [usize; 3];

fn mask(shape: Shape, spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> u8) -> LabelMask {
    let [dd, hh, ww] = shape;
    let mut l = Vec::with_capacity(dd * hh * ww);
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                l.push(f(d, h, w));
            }
        }
    }
    LabelMask::new(shape, spacing, l).unwrap()
}

/// Surface voxels by explicit neighbour lookup, out-of-volume as background.
fn brute_surface(m: &LabelMask, label: u8) -> Vec<[usize; 3]> {
    let [dd, hh, ww] = m.shape();
    let get = |d: isize, h: isize, w: isize| -> bool {
        if d < 0 || h < 0 || w < 0 || d >= dd as isize || h >= hh as isize || w >= ww as isize {
            return false;
        }
        m.labels()[(d as usize * hh + h as usize) * ww + w as usize] == label
    };
    let mut out = Vec::new();
    for d in 0..dd as isize {
        for h in 0..hh as isize {
            for w in 0..ww as isize {
                if !get(d, h, w) {
                    continue;
                }
                let n = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if n.iter().any(|&(a, b, c)| !get(d + a, h + b, w + c)) {
                    out.push([d as usize, h as usize, w as usize]);
                }
            }
        }
    }
    out
}

/// Symmetric mean of nearest-surface distances over all surface pairs.
fn brute_asd(a: &LabelMask, b: &LabelMask, label: u8, spacing: [f64; 3]) -> f64 {
    let (sa, sb) = (brute_surface(a, label), brute_surface(b, label));
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mean_min = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (mean_min(&sa, &sb) + mean_min(&sb, &sa))
}

fn cube(shape: Shape, spacing: [f64; 3], origin: [usize; 3], side: usize) -> LabelMask {
    mask(shape, spacing, |d, h, w| {
        let p = [d, h, w];
        (0..3).all(|k| p[k] >= origin[k] && p[k] < origin[k] + side) as u8
    })
}

#[test]
fn offset_cubes_match_exhaustive_pairwise_distances() {
    let shape = [10, 10, 10];
    let spacing = [1.0; 3];
    let a = cube(shape, spacing, [3, 3, 3], 4);
    let b = cube(shape, spacing, [4, 3, 3], 4);
    let oracle = brute_asd(&a, &b, 1, spacing);
    let got = asd(&a, &b, 1, spacing).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    assert!(got > 0.0);
}

#[test]
fn anisotropic_spacing_matches_oracle() {
    let shape = [9, 8, 12];
    let spacing = [2.5, 0.7, 1.2];
    let a = mask(shape, spacing, |d, h, w| ((d + 2 * h + w) % 7 < 3 && d > 1) as u8);
    let b = mask(shape, spacing, |d, h, w| ((d * h + w) % 5 < 2 && w < 10) as u8);
    let oracle = brute_asd(&a, &b, 1, spacing);
    let got = asd(&a, &b, 1, spacing).unwrap();
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
}

#[test]
fn cubes_touching_the_border_treat_outside_as_background() {
    let shape = [6, 6, 6];
    let spacing = [1.0; 3];
    let a = cube(shape, spacing, [0, 0, 0], 6);
    let b = cube(shape, spacing, [1, 1, 1], 4);
    let oracle = brute_asd(&a, &b, 1, spacing);
    assert!((asd(&a, &b, 1, spacing).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn dice_identical_disjoint_and_half() {
    let shape = [4, 4, 4];
    let s = [1.0; 3];
    let a = mask(shape, s, |d, _, _| (d < 2) as u8);
    let b = mask(shape, s, |d, _, _| (d >= 2) as u8);
    assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    // |A| = |B| = 8, |A ∩ B| = 4.
    let a = mask(shape, s, |d, h, w| (d < 2 && h < 2 && w < 2) as u8);
    let b = mask(shape, s, |d, h, w| (d < 2 && h < 2 && (1..3).contains(&w)) as u8);
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
}

#[test]
fn mismatched_masks_are_rejected() {
    let a = mask([4, 4, 4], [1.0; 3], |_, _, _| 1);
    let b = mask([4, 4, 5], [1.0; 3], |_, _, _| 1);
    assert!(dice(&a, &b, 1).is_err());
    assert!(asd(&a, &b, 1, [1.0; 3]).is_err());
}

#[test]
fn linear_fields_have_analytic_determinants() {
    let shape = [6, 7, 5];
    let f = DisplacementField::from_fn(shape, |d, h, w| [0.1 * d as f64, 0.1 * h as f64, 0.1 * w as f64])
        .unwrap();
    let s = jacobian_stats(&f);
    assert_eq!(s.interior_shape, [5, 6, 4]);
    assert!(s.det.iter().all(|&x| (x - 1.331).abs() < 1e-5));
    assert_eq!(s.folding_count, 0);

    let f = DisplacementField::from_fn(shape, |d, _, _| [-2.0 * d as f64, 0.0, 0.0]).unwrap();
    let s = jacobian_stats(&f);
    assert!(s.det.iter().all(|&x| (x + 1.0).abs() < 1e-5));
    assert_eq!(s.folding_count, s.det.len());
}

#[test]
fn identity_pipeline_report() {
    let shape = [8, 8, 8];
    let labels = mask(shape, [1.0; 3], |d, h, w| match (d < 4, h < 4, w < 4) {
        (true, true, _) => 1,
        (false, _, true) => 2,
        (_, false, false) => 3,
        _ => 0,
    });
    let zero = DisplacementField::zeros(shape).unwrap();
    let r = evaluate_pair(&zero, &labels, &labels, [1.0; 3]).unwrap();
    assert_eq!(r.labels.len(), 3);
    for score in r.labels.values() {
        assert_eq!(score.dice, 1.0);
        assert_eq!(score.asd_mm, Some(0.0));
    }
    assert_eq!(r.folding_count, 0);
    assert_eq!(r.jacobian_std, 0.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    r.save(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["labels", "folding_count", "jacobian_std", "runtime_s"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["labels"]["2"]["dice"], 1.0);
    assert_eq!(EvalReport::load(&path).unwrap(), r);
}
