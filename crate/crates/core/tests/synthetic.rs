use f3rnet::metrics::{dice, jacobian_stats};
use f3rnet::stn::{warp, warp_labels};
use f3rnet::volgrid::{synth_deformation, synth_phantom, LabelMask, Volume};

#[test]
fn phantom_is_deterministic_with_four_labels_away_from_the_border() {
    let shape = [32, 28, 24];
    let (v1, m1) = synth_phantom(5, shape).unwrap();
    let (v2, m2) = synth_phantom(5, shape).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(m1, m2);
    assert_eq!(m1.label_set(), vec![0, 1, 2, 3]);
    assert!(v1.data().iter().all(|&x| (0.0..=1.0).contains(&x)));

    let [dd, hh, ww] = shape;
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                if m1.labels()[(d * hh + h) * ww + w] != 0 {
                    let p = [d, h, w];
                    assert!((0..3).all(|k| p[k] >= 2 && p[k] + 2 < shape[k]), "{p:?}");
                }
            }
        }
    }
    let (v3, _) = synth_phantom(6, shape).unwrap();
    assert_ne!(v1, v3);
}

#[test]
fn organs_are_brighter_than_background_on_average() {
    let (v, m) = synth_phantom(1, [32, 32, 32]).unwrap();
    let mean = |label: u8| {
        let vals: Vec<f64> = v
            .data()
            .iter()
            .zip(m.labels())
            .filter(|(_, &l)| l == label)
            .map(|(&x, _)| x as f64)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let means: Vec<f64> = (0..4).map(mean).collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn zero_amplitude_gives_zero_field() {
    let f = synth_deformation(3, [16, 16, 16], 0.0, 4.0).unwrap();
    assert!(f.data().iter().all(|&x| x == 0.0));
}

#[test]
fn reference_deformation_is_fold_free_and_scaled() {
    let f = synth_deformation(2, [48, 48, 48], 3.0, 8.0).unwrap();
    assert_eq!(jacobian_stats(&f).folding_count, 0);
    assert!((f.max_magnitude() - 3.0).abs() < 1e-5);
    assert_eq!(synth_deformation(2, [48, 48, 48], 3.0, 8.0).unwrap(), f);
}

#[test]
fn invalid_deformation_arguments_are_rejected() {
    assert!(synth_deformation(0, [16, 16, 16], -1.0, 4.0).is_err());
    assert!(synth_deformation(0, [16, 16, 16], 1.0, 0.0).is_err());
}

/// One label as a 0/1 intensity volume.
fn indicator(m: &LabelMask, label: u8) -> Volume {
    let data = m.labels().iter().map(|&l| (l == label) as u8 as f32).collect();
    Volume::new(m.shape(), m.spacing_mm(), data).unwrap()
}

#[test]
fn nearest_neighbour_labels_agree_with_interpolated_indicators() {
    // The reference warps each indicator trilinearly and thresholds at one
    // half; only nearest-neighbour resampling separates the two.
    let shape = [48, 48, 48];
    let (_, labels) = synth_phantom(7, shape).unwrap();
    let field = synth_deformation(8, shape, 3.0, 8.0).unwrap();
    let nn = warp_labels(&labels, &field).unwrap();
    for label in 1..=3u8 {
        let soft = warp(&indicator(&labels, label), &field).unwrap();
        let hard: Vec<u8> = soft.data().iter().map(|&x| if x >= 0.5 { label } else { 0 }).collect();
        let reference = LabelMask::new(shape, [1.0; 3], hard).unwrap();
        let d = dice(&nn, &reference, label).unwrap();
        assert!(d >= 0.95, "label {label}: dice {d}");
    }
}
