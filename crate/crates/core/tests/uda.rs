use datr::uda::*;
use numkit::{grad_check, Rng, Tape, Tensor};
use proptest::prelude::*;

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn random_labels(rng: &mut Rng, n: usize, k: usize) -> Vec<u8> {
    (0..n)
        .map(|_| if rng.below(8) == 0 { IGNORE } else { rng.below(k) as u8 })
        .collect()
}

#[test]
fn pooled_centers_match_brute_force() {
    let mut rng = Rng::new(4);
    let (k, d) = (4, 3);
    let maps: Vec<(Tensor<f64>, Vec<u8>)> = [6, 9, 5]
        .iter()
        .map(|&n| (random_tensor(&mut rng, &[n, d]), random_labels(&mut rng, n, k)))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = maps.iter().map(|(f, _)| tape.constant(f.clone())).collect();
    let pairs: Vec<_> = vars.iter().zip(&maps).map(|(v, (_, l))| (*v, l.as_slice())).collect();
    let (c, valid) = class_centers_tape(&mut tape, &pairs, k).unwrap();
    let got = tape.value(c).clone();
    for class in 0..k {
        let rows: Vec<&[f64]> = maps
            .iter()
            .flat_map(|(f, l)| f.data().chunks(d).zip(l).filter(|(_, &x)| x as usize == class).map(|(r, _)| r))
            .collect();
        assert_eq!(valid[class], !rows.is_empty());
        for j in 0..d {
            let mean = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64 };
            assert!((got.data()[class * d + j] - mean).abs() < 1e-12);
        }
    }
    // single map agrees with the plain version
    let (plain, pv) = class_centers(&maps[0].0, &maps[0].1, k);
    let mut tape = Tape::new();
    let v = tape.constant(maps[0].0.clone());
    let (c, tv) = class_centers_tape(&mut tape, &[(v, &maps[0].1)], k).unwrap();
    assert_eq!(pv, tv);
    for (a, b) in plain.data().iter().zip(tape.value(c).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cfa_loss_gradient_matches_finite_differences() {
    let mut rng = Rng::new(8);
    let (k, d) = (3, 4);
    let labels_s = vec![0u8, 1, 1, 2, 0, IGNORE, 1, 0];
    let labels_t = vec![2u8, 1, 1, 1, 2, 0, IGNORE, 2];
    let mut bank = ClassCenterBank::new(k, d);
    let prev_s: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
    let prev_t: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
    bank_update(&mut bank, &prev_s, &[true, true, false], &prev_t, &[true, true, true], 1).unwrap();
    let fs = random_tensor(&mut rng, &[8, d]);
    let ft = random_tensor(&mut rng, &[8, d]);
    let check = grad_check(
        |tape, v| {
            let (cs, vs) = class_centers_tape(tape, &[(v[0], &labels_s)], k).unwrap();
            let (ct, vt) = class_centers_tape(tape, &[(v[1], &labels_t)], k).unwrap();
            let (ms, vs) = mixed_centers_tape(tape, &bank, Domain::Source, cs, &vs, 3).unwrap();
            let (mt, vt) = mixed_centers_tape(tape, &bank, Domain::Target, ct, &vt, 3).unwrap();
            Ok(cfa_loss_tape(tape, ms, &vs, mt, &vt).unwrap())
        },
        &[fs, ft],
        1e-3,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{check:?}");
}

#[test]
fn tape_cfa_equals_bank_cfa_after_update() {
    let mut rng = Rng::new(2);
    let (k, d) = (4, 5);
    let mut bank = ClassCenterBank::new(k, d);
    let s0: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
    let t0: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
    bank_update(&mut bank, &s0, &[true, false, true, true], &t0, &[true, true, false, true], 1).unwrap();
    let s1 = random_tensor(&mut rng, &[k, d]);
    let t1 = random_tensor(&mut rng, &[k, d]);
    let (vs, vt) = ([true, true, false, true], [false, true, true, true]);
    let mut tape = Tape::new();
    let (cs, ct) = (tape.constant(s1.clone()), tape.constant(t1.clone()));
    let (ms, mvs) = mixed_centers_tape(&mut tape, &bank, Domain::Source, cs, &vs, 2).unwrap();
    let (mt, mvt) = mixed_centers_tape(&mut tape, &bank, Domain::Target, ct, &vt, 2).unwrap();
    let l = cfa_loss_tape(&mut tape, ms, &mvs, mt, &mvt).unwrap();
    let on_tape = tape.value(l).item();
    bank_update(&mut bank, s1.data(), &vs, t1.data(), &vt, 2).unwrap();
    assert!((on_tape - cfa_loss(&bank)).abs() < 1e-12);
    assert_eq!(bank.shared_classes(), [0, 1, 2, 3]);
}

#[test]
fn pseudo_labels_are_idempotent_argmax() {
    let mut rng = Rng::new(6);
    let logits = random_tensor(&mut rng, &[50, 5]);
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let p = tape.softmax(x, 1).unwrap();
    let probs = tape.value(p).clone();
    let pl = make_pseudo_labels(&probs, 0.0).unwrap();
    // one-hot of the labels maps back to the same labels
    let mut onehot = vec![0.0; 50 * 5];
    for (i, &l) in pl.labels.iter().enumerate() {
        onehot[i * 5 + l as usize] = 1.0;
    }
    let again = make_pseudo_labels(&Tensor::from_vec(&[50, 5], onehot).unwrap(), 0.0).unwrap();
    assert_eq!(again.labels, pl.labels);
    assert!(again.confidence.iter().all(|&c| c == 1.0));
    let strict = make_pseudo_labels(&probs, 0.5).unwrap();
    for i in 0..50 {
        let expect = if pl.confidence[i] < 0.5 { IGNORE } else { pl.labels[i] };
        assert_eq!(strict.labels[i], expect);
    }
}

#[test]
fn segmentation_losses_agree_and_have_correct_gradient() {
    let mut rng = Rng::new(12);
    let logits = random_tensor(&mut rng, &[20, 4]);
    let labels = random_labels(&mut rng, 20, 4);
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let p = tape.softmax(x, 1).unwrap();
    let a = seg_loss(&mut tape, p, &labels).unwrap();
    let b = seg_loss_logits(&mut tape, x, &labels).unwrap();
    assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
    // oracle: mean -ln softmax over supervised pixels
    let mut total = 0.0;
    let mut n = 0;
    for (row, &l) in logits.data().chunks(4).zip(&labels) {
        if l == IGNORE {
            continue;
        }
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l as usize];
        n += 1;
    }
    assert!((tape.value(a).item() - total / n as f64).abs() < 1e-12);
    let check = grad_check(
        |t, v| {
            let p = t.softmax(v[0], 1)?;
            Ok(seg_loss(t, p, &labels).unwrap())
        },
        &[logits],
        1e-3,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{check:?}");
    let all = vec![IGNORE; 20];
    assert!(all_ignored(&all));
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&mut rng, &[20, 4]));
    let z = seg_loss_logits(&mut tape, x, &all).unwrap();
    assert_eq!(tape.value(z).item(), 0.0);
}

#[test]
fn poly_schedule_endpoints() {
    assert_eq!(poly_lr(0, 100, 1e-3), 1e-3);
    assert_eq!(poly_lr(100, 100, 1e-3), 0.0);
    assert!((poly_lr(50, 100, 1.0) - 0.5f64.powf(0.9)).abs() < 1e-15);
}

#[test]
fn mix_coefficients_reject_epoch_zero() {
    assert!(mix_coefficients(0).is_err());
    assert_eq!(mix_coefficients(1).unwrap(), (0.0, 1.0));
}

proptest! {
    #[test]
    fn mixed_center_stays_in_convex_hull(
        e in 1usize..20,
        stored in prop::collection::vec(-5.0f64..5.0, 6),
        updates in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..6),
    ) {
        let mut bank = ClassCenterBank::new(2, 3);
        bank.update_domain(Domain::Source, &stored, &[true, true], 1).unwrap();
        let mut lo = stored.clone();
        let mut hi = stored.clone();
        for (i, u) in updates.iter().enumerate() {
            bank.update_domain(Domain::Source, u, &[true, true], e + i).unwrap();
            for j in 0..6 {
                lo[j] = lo[j].min(u[j]);
                hi[j] = hi[j].max(u[j]);
            }
        }
        let (c, _) = bank.centers(Domain::Source);
        for j in 0..6 {
            prop_assert!(c[j] >= lo[j] - 1e-12 && c[j] <= hi[j] + 1e-12);
        }
    }

    #[test]
    fn mix_weights_sum_to_one(e in 1usize..10_000) {
        let (a, b) = mix_coefficients(e).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-15 && a >= 0.0 && b > 0.0);
    }

    #[test]
    fn nearest_labels_identity_and_range(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let labels: Vec<u8> = (0..h * w).map(|_| rng.below(5) as u8).collect();
        prop_assert_eq!(nearest_labels(&labels, h, w, h, w), labels.clone());
        let down = nearest_labels(&labels, h, w, (h + 1) / 2, (w + 1) / 2);
        prop_assert!(down.iter().all(|l| labels.contains(l)));
    }
}
