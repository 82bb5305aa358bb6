//! Acceptance suite: one PASS/FAIL line per criterion.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use datr::attention::{mhsa_reference, neighbor_table, DaConfig, DaLayer, PeMode};
use datr::config::RunConfig;
use datr::erpgeo::ErpSpec;
use datr::metrics::miou;
use datr::model::{build_model, random_image, ModelConfig, Structure, Variant};
use datr::synthdata::{generate_dataset, generate_pair, load_domain, DomainKind, DomainSet, GenConfig};
use datr::train::{image_tensor, TrainData, TrainState, CKPT_LAST};
use datr::uda::{class_centers_tape, cfa_loss_tape, mixed_centers_tape, ClassCenterBank, Domain, IGNORE};
use numkit::{grad_check, rng_normal, Binding, NumError, PatchGeometry, ResizeGeometry, Rng, Scalar, Tape, Tensor, Var};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

/// Cores the 4-core runtime budgets are scaled from.
fn core_scale() -> f64 {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    4.0 / cores as f64
}

// ---------------------------------------------------------------- 1

/// Dense attention over all keys with a mask built from window geometry.
fn masked_oracle(q: &[f64], k: &[f64], v: &[f64], rpe: &[f64], h: usize, w: usize, cfg: &DaConfig) -> Vec<f64> {
    let (heads, d) = (cfg.heads, cfg.d_head);
    let c = heads * d;
    let n = h * w;
    let (wh, ww) = (cfg.window_h, cfg.window_w);
    let wrap = cfg.wrap_horizontal && ww < w;
    let mut out = vec![0.0; n * c];
    for qi in 0..n {
        let (i, j) = (qi / w, qi % w);
        let eh = wh.min(h);
        let top = i.saturating_sub(wh / 2).min(h - eh);
        let ew = ww.min(w);
        let left = j.saturating_sub(ww / 2).min(w - ew);
        // mask[key] = Some(slot) when key is attended
        let mask: Vec<Option<usize>> = (0..n)
            .map(|key| {
                let (r, col) = (key / w, key % w);
                if r < top || r >= top + eh {
                    return None;
                }
                let dc = if wrap {
                    let rel = (col as isize - j as isize).rem_euclid(w as isize) as usize;
                    let signed = if rel > w / 2 { rel as isize - w as isize } else { rel as isize };
                    if signed.unsigned_abs() > ww / 2 {
                        return None;
                    }
                    (signed + (ww / 2) as isize) as usize
                } else {
                    if col < left || col >= left + ew {
                        return None;
                    }
                    col - left
                };
                Some((r - top) * ww + dc)
            })
            .collect();
        for hd in 0..heads {
            let dot = |key: usize| (0..d).map(|t| q[qi * c + hd * d + t] * k[key * c + hd * d + t]).sum::<f64>();
            let logits: Vec<f64> = (0..n)
                .map(|key| if mask[key].is_some() { dot(key) / (d as f64).sqrt() } else { f64::NEG_INFINITY })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for key in 0..n {
                if let Some(slot) = mask[key] {
                    let p = (logits[key] - m).exp() / z;
                    for t in 0..d {
                        out[qi * c + hd * d + t] += p * (v[key * c + hd * d + t] + rpe[(hd * wh * ww + slot) * d + t]);
                    }
                }
            }
        }
    }
    out
}

fn da_forward<T: Scalar>(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, rpe: &Tensor<f64>, h: usize, w: usize, cfg: &DaConfig) -> Vec<f64> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = [q, k, v, rpe].iter().map(|t| tape.constant(t.cast())).collect();
    let table = Rc::new(neighbor_table(h, w, cfg).unwrap());
    let out = tape
        .neighborhood_attention(vars[0], vars[1], vars[2], Some(vars[3]), table, cfg.heads, cfg.scale())
        .unwrap();
    tape.value(out).data().iter().map(|x| x.to_f64()).collect()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = Rng::new(1001);
    let (mut e32, mut e64) = (0f64, 0f64);
    let mut wrapped = 0;
    for _ in 0..50 {
        let h = 4 + rng.below(6);
        let w = 4 + rng.below(6);
        let c = [4, 8][rng.below(2)];
        let heads = 1 + rng.below(2);
        let win = [1, 3, 5][rng.below(3)];
        let wrap = rng.below(2) == 1;
        wrapped += usize::from(wrap && win < w);
        let cfg = DaConfig { window_h: win, window_w: win, heads, d_head: c / heads, pe_mode: PeMode::Rpe, wrap_horizontal: wrap };
        let n = h * w;
        let q = rng_normal(&mut rng, &[n, c], 1.0);
        let k = rng_normal(&mut rng, &[n, c], 1.0);
        let v = rng_normal(&mut rng, &[n, c], 1.0);
        let rpe = rng_normal(&mut rng, &[heads, win * win, c / heads], 0.5);
        let expect = masked_oracle(q.data(), k.data(), v.data(), rpe.data(), h, w, &cfg);
        let max_diff = |got: Vec<f64>| got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        e64 = e64.max(max_diff(da_forward::<f64>(&q, &k, &v, &rpe, h, w, &cfg)));
        e32 = e32.max(max_diff(da_forward::<f32>(&q, &k, &v, &rpe, h, w, &cfg)));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        e64 <= 1e-10 && e32 <= 1e-5 && secs < 10.0 * core_scale(),
        format!("50 instances ({wrapped} wrapped), max err f64 {e64:.2e} (tol 1e-10), f32 {e32:.2e} (tol 1e-5), {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0f64;
    for (seed, (h, w)) in [(5usize, 7usize), (6, 6), (4, 9)].into_iter().enumerate() {
        let mut rng = Rng::new(2000 + seed as u64);
        let mut store = numkit::ParamStore::<f32>::new();
        let cfg = DaConfig { window_h: 2 * h + 1, window_w: 2 * w + 1, heads: 2, d_head: 4, pe_mode: PeMode::Rpe, wrap_horizontal: false };
        let da = DaLayer::new(&mut store, "da", cfg, &mut rng).unwrap();
        store.get_mut(da.rpe.unwrap()).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(rng_normal(&mut rng, &[h * w, 8], 1.0));
        let a = da.forward(&mut tape, &p, x, h, w).unwrap();
        let b = mhsa_reference(&mut tape, &p, &da.attn, x).unwrap();
        worst = worst.max(tape.value(a).max_abs_diff(tape.value(b)));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst <= 1e-5 && secs < 5.0 * core_scale(), format!("3 maps, f32 max err {worst:.2e} (tol 1e-5), {secs:.2}s"))
}

// ---------------------------------------------------------------- 3

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> numkit::Result<Var>>;

fn project(t: &mut Tape<f64>, x: Var, seed: u64) -> numkit::Result<Var> {
    let shape = t.shape(x).to_vec();
    let w = t.constant(rng_normal(&mut Rng::new(seed), &shape, 1.0));
    let y = t.mul(x, w)?;
    t.sum(y)
}

fn op(name: &'static str, shapes: &[&[usize]], f: OpFn) -> (&'static str, Vec<Vec<usize>>, OpFn) {
    (name, shapes.iter().map(|s| s.to_vec()).collect(), f)
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let da = DaConfig { window_h: 3, window_w: 3, heads: 2, d_head: 2, pe_mode: PeMode::Rpe, wrap_horizontal: false };
    let table = Rc::new(neighbor_table(4, 3, &da).unwrap());
    let da_wrap = DaConfig { wrap_horizontal: true, window_h: 1, ..da };
    let table_wrap = Rc::new(neighbor_table(3, 4, &da_wrap).unwrap());
    let labels: Vec<u8> = vec![1, 0, IGNORE, 2, 2, 1];
    let labels2 = labels.clone();
    vec![
        op("add", &[&[3, 4], &[3, 4]], Box::new(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, 1) })),
        op("sub", &[&[3, 4], &[3, 4]], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 2) })),
        op("mul", &[&[3, 4], &[3, 4]], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 3) })),
        op("scale", &[&[3, 4]], Box::new(|t, v| { let y = t.scale(v[0], -1.7)?; project(t, y, 4) })),
        op("add_bias", &[&[3, 4], &[4]], Box::new(|t, v| { let y = t.add_bias(v[0], v[1])?; project(t, y, 5) })),
        op("matmul", &[&[3, 4], &[4, 5]], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, 6) })),
        op("linear", &[&[3, 4], &[4, 2], &[2]], Box::new(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; project(t, y, 7) })),
        op("transpose", &[&[3, 5]], Box::new(|t, v| { let y = t.transpose(v[0])?; project(t, y, 8) })),
        op("reshape", &[&[3, 4]], Box::new(|t, v| { let y = t.reshape(v[0], &[6, 2])?; project(t, y, 9) })),
        op("softmax", &[&[3, 5]], Box::new(|t, v| { let y = t.softmax(v[0], 1)?; project(t, y, 10) })),
        op("layernorm", &[&[4, 6], &[6], &[6]], Box::new(|t, v| { let y = t.layernorm(v[0], v[1], v[2], 1e-6)?; project(t, y, 11) })),
        op("gelu", &[&[4, 5]], Box::new(|t, v| { let y = t.gelu(v[0])?; project(t, y, 12) })),
        op("relu", &[&[4, 5]], Box::new(|t, v| { let y = t.relu(v[0])?; project(t, y, 13) })),
        op("concat_last", &[&[3, 2], &[3, 4]], Box::new(|t, v| { let y = t.concat_last(&[v[0], v[1]])?; project(t, y, 14) })),
        op("slice_last", &[&[3, 5]], Box::new(|t, v| { let y = t.slice_last(v[0], 1, 3)?; project(t, y, 15) })),
        op("slice_rows", &[&[5, 3]], Box::new(|t, v| { let y = t.slice_rows(v[0], 2, 2)?; project(t, y, 16) })),
        op("sum", &[&[3, 4]], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; t.sum(y) })),
        op("mean", &[&[3, 4]], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; t.mean(y) })),
        op(
            "unfold",
            &[&[20, 2]],
            Box::new(|t, v| {
                let y = t.unfold(v[0], PatchGeometry::conv(4, 5, 2, 3, 2, 1)?)?;
                project(t, y, 17)
            }),
        ),
        op(
            "unfold_blocks",
            &[&[15, 2]],
            Box::new(|t, v| {
                let y = t.unfold(v[0], PatchGeometry::blocks(3, 5, 2, 2)?)?;
                project(t, y, 18)
            }),
        ),
        op(
            "resize_bilinear",
            &[&[6, 2]],
            Box::new(|t, v| {
                let y = t.resize_bilinear(v[0], ResizeGeometry { in_h: 2, in_w: 3, channels: 2, out_h: 5, out_w: 7 })?;
                project(t, y, 19)
            }),
        ),
        op(
            "neighborhood_attention+rpe",
            &[&[12, 4], &[12, 4], &[12, 4], &[2, 9, 2]],
            Box::new(move |t, v| {
                let y = t.neighborhood_attention(v[0], v[1], v[2], Some(v[3]), table.clone(), 2, da.scale())?;
                project(t, y, 20)
            }),
        ),
        op(
            "neighborhood_attention_wrap",
            &[&[12, 4], &[12, 4], &[12, 4], &[2, 3, 2]],
            Box::new(move |t, v| {
                let y = t.neighborhood_attention(v[0], v[1], v[2], Some(v[3]), table_wrap.clone(), 2, 0.5)?;
                project(t, y, 21)
            }),
        ),
        op("attention", &[&[5, 4], &[3, 4], &[3, 4]], Box::new(|t, v| { let y = t.attention(v[0], v[1], v[2], 2, 0.7)?; project(t, y, 22) })),
        op("softmax_cross_entropy", &[&[6, 3]], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels, IGNORE))),
        op(
            "nll",
            &[&[6, 3]],
            Box::new(move |t, v| {
                let p = t.softmax(v[0], 1)?;
                t.nll(p, &labels2, IGNORE, 1e-12)
            }),
        ),
        op(
            "class_centers+cfa",
            &[&[8, 3], &[8, 3]],
            Box::new(|t, v| {
                let ls = [0u8, 1, 1, 2, 0, IGNORE, 1, 0];
                let lt = [2u8, 1, 1, 1, 2, 0, IGNORE, 2];
                let mut bank = ClassCenterBank::new(3, 3);
                let prev: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
                bank.update_domain(Domain::Source, &prev, &[true, false, true], 1).unwrap();
                bank.update_domain(Domain::Target, &prev, &[true, true, true], 1).unwrap();
                let wrap = |e: datr::DatrError| NumError::Oracle(e.to_string());
                let (cs, vs) = class_centers_tape(t, &[(v[0], &ls)], 3).map_err(wrap)?;
                let (ct, vt) = class_centers_tape(t, &[(v[1], &lt)], 3).map_err(wrap)?;
                let (ms, vs) = mixed_centers_tape(t, &bank, Domain::Source, cs, &vs, 2).map_err(wrap)?;
                let (mt, vt) = mixed_centers_tape(t, &bank, Domain::Target, ct, &vt, 2).map_err(wrap)?;
                cfa_loss_tape(t, ms, &vs, mt, &vt).map_err(wrap)
            }),
        ),
    ]
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = Rng::new(3003);
    let mut worst = (0f64, "");
    let cases = op_cases();
    let count = cases.len();
    for (name, shapes, f) in cases {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                // keep relu inputs away from its kink
                let t: Tensor<f64> = rng_normal(&mut rng, s, 1.0);
                if name == "relu" { t.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x }) } else { t }
            })
            .collect();
        let r = match grad_check(&*f, &inputs, 1e-3) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        };
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
    }
    // end-to-end tiny model, RPE tables included
    let mut cfg = ModelConfig::custom(Variant::M, [4, 4, 8, 4], [1, 1, 1, 1], [1, 1, 2, 2], 4, 3);
    cfg.window = 3;
    for st in &mut cfg.stages {
        st.mlp_ratio = 2;
    }
    let m = build_model::<f64>(&cfg, &mut rng).unwrap();
    let n_params = m.param_count();
    let rpe_tensors = m.params.iter().filter(|(_, n, _)| n.ends_with(".rpe")).count();
    let img = random_image::<f64>(&mut rng, 32, 32);
    let labels: Vec<u8> = (0..32 * 32).map(|_| rng.below(3) as u8).collect();
    let params: Vec<Tensor<f64>> = m
        .params
        .iter()
        .map(|(_, _, t)| {
            let noise = rng_normal::<f64>(&mut rng, t.shape(), 0.4);
            Tensor::from_vec(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap()
        })
        .collect();
    let model = grad_check(
        |tape, vars| {
            let p = Binding::from_vars(vars.to_vec());
            let x = tape.constant(img.clone());
            let out = m.forward(tape, &p, x, 32, 32).map_err(|e| NumError::Oracle(e.to_string()))?;
            let up = m.upsample_logits(tape, out.logits, 32, 32).map_err(|e| NumError::Oracle(e.to_string()))?;
            tape.softmax_cross_entropy(up, &labels, IGNORE)
        },
        &params,
        1e-3,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1e-4 && model.max_rel_error <= 1e-4 && n_params <= 5000 && rpe_tensors > 0 && secs < 120.0 * core_scale(),
        format!(
            "{count} ops worst {:.2e} ({}), model ({n_params} params, {rpe_tensors} RPE tables) {:.2e}, tol 1e-4, {secs:.1}s",
            worst.0, worst.1, model.max_rel_error
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Circumference of the latitude circle at axial height `h` on a sphere of
/// circumference `width`, measured as a fine polygon in 3-D.
fn polygon_circumference(width: f64, h: f64) -> f64 {
    let r = width / TAU;
    let z = r - h;
    let segments = 200_000;
    let point = |i: usize| {
        let phi = TAU * i as f64 / segments as f64;
        let rho = (r * r - z * z).max(0.0).sqrt();
        [rho * phi.cos(), rho * phi.sin(), z]
    };
    (0..segments)
        .map(|i| {
            let (a, b) = (point(i), point(i + 1));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum()
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let mut rng = Rng::new(4004);
    let (width, n) = (512.0, 512);
    let at_equator = ErpSpec::new(width, n, 7, ErpSpec::equator(width)).distortion_coefficient().unwrap().abs();
    let mut identity_err = 0f64;
    let mut doubling_exact = true;
    let mut bounded = true;
    for _ in 0..1000 {
        let h = rng.uniform() * width / PI;
        let np = 1 + rng.below(n / 2);
        let s = ErpSpec::new(width, n, np, h);
        let dis = s.distortion_coefficient().unwrap();
        let pw = s.pixel_width().unwrap();
        identity_err = identity_err.max((dis - np as f64 * (width / n as f64 - pw)).abs());
        doubling_exact &= ErpSpec::new(width, n, 2 * np, h).distortion_coefficient().unwrap() == 2.0 * dis;
        bounded &= pw <= width / n as f64;
    }
    let worked = ErpSpec::new(TAU, 8, 4, 0.5).distortion_coefficient().unwrap();
    let oracle = 4.0 * (TAU - polygon_circumference(TAU, 0.5)) / 8.0;
    let digits6 = format!("{worked:.6}") == "0.420894" && format!("{oracle:.6}") == "0.420894";
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        at_equator <= 1e-12 && identity_err <= 1e-12 && doubling_exact && bounded && digits6 && secs < core_scale(),
        format!(
            "equator {at_equator:.1e}, identity {identity_err:.1e}, doubling exact {doubling_exact}, width bound {bounded}, worked {worked:.6} vs sphere {oracle:.6}, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (variant, target) in [(Variant::M, 4.64e6), (Variant::T, 14.72e6), (Variant::S, 25.76e6)] {
        let m = build_model::<f32>(&ModelConfig::preset(variant, 19), &mut Rng::new(5)).unwrap();
        let got = m.param_count() as f64;
        let dev = got / target - 1.0;
        ok &= dev.abs() <= 0.15;
        parts.push(format!("{variant} {:.2}M ({:+.1}%)", got / 1e6, 100.0 * dev));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(ok && secs < 10.0 * core_scale(), format!("{} (19 classes, tol 15%), {secs:.2}s", parts.join(", ")))
}

// ---------------------------------------------------------------- 6

const TOY_LR: f64 = 1e-3;
const TOY_SEEDS: u64 = 3;

struct ArmResult {
    miou: f64,
    first_dist: Option<f64>,
    last_dist: Option<f64>,
}

fn run_arm(base: &TrainState<f32>, data: &TrainData, val: &DomainSet, lambda_ss: f64, lambda_f: f64) -> ArmResult {
    let mut arm = base.clone();
    arm.run.lambda_ss = lambda_ss;
    arm.run.lambda_f = lambda_f;
    arm.run(data, None).unwrap();
    let adapt: Vec<_> = arm.log.iter().skip(arm.run.epochs_source).collect();
    ArmResult {
        miou: arm.evaluate(val).unwrap().miou(),
        first_dist: adapt.first().and_then(|r| r.center_dist),
        last_dist: adapt.last().and_then(|r| r.center_dist),
    }
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig { seed: 0, classes: 5, pinhole_size: [128, 128], erp_size: [128, 256], n_train: 128, n_val: 32, ..GenConfig::default() };
    generate_dataset(&gen, dir.path()).unwrap();
    let source = load_domain(dir.path(), "train", DomainKind::Source).unwrap();
    let target = load_domain(dir.path(), "train", DomainKind::Target).unwrap();
    let val = load_domain(dir.path(), "val", DomainKind::Target).unwrap();
    let data = TrainData { source: &source, target: &target, val: None };
    let mut sums = [0.0f64; 3];
    let (mut first, mut last) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..TOY_SEEDS {
        let run = RunConfig {
            variant: Variant::M,
            lr: TOY_LR,
            epochs_source: 5,
            epochs_adapt: 10,
            batch_size: 4,
            seed,
            ..RunConfig::default()
        };
        let mut shared = TrainState::<f32>::new(run, gen.classes).unwrap();
        shared.run_until(&data, 5, None).unwrap();
        let arms = [
            run_arm(&shared, &data, &val, 0.0, 0.0),
            run_arm(&shared, &data, &val, 1.0, 0.0),
            run_arm(&shared, &data, &val, 1.0, 0.1),
        ];
        for (s, a) in sums.iter_mut().zip(&arms) {
            *s += 100.0 * a.miou / TOY_SEEDS as f64;
        }
        first += arms[2].first_dist.unwrap_or(f64::NAN) / TOY_SEEDS as f64;
        last += arms[2].last_dist.unwrap_or(f64::NAN) / TOY_SEEDS as f64;
        per_seed.push(format!("{:.1}/{:.1}/{:.1}", 100.0 * arms[0].miou, 100.0 * arms[1].miou, 100.0 * arms[2].miou));
        println!("  criterion 6 seed {seed}: source/ss/cfa mIoU {} ({:.0}s)", per_seed.last().unwrap(), t0.elapsed().as_secs_f64());
    }
    let [src, ss, cfa] = sums;
    let secs = t0.elapsed().as_secs_f64();
    let budget = 30.0 * 60.0 * core_scale();
    let passed = cfa >= ss && ss >= src && cfa >= src + 3.0 && last < first && secs <= budget;
    outcome(
        passed,
        format!(
            "mean mIoU source {src:.2} / SS {ss:.2} / CFA {cfa:.2} (seeds {}); CFA center distance {first:.4} -> {last:.4}; {:.1} min (budget {:.0} min)",
            per_seed.join(", "),
            secs / 60.0,
            budget / 60.0
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig { seed: 7, n_train: 2, n_val: 0, ..GenConfig::default() };
    let pairs: Vec<_> = (0..2).map(|i| generate_pair(&gen, "train", i).unwrap()).collect();
    // panoramas with labels serve as the training domain here
    let erp = DomainSet::from_samples(pairs.iter().map(|p| &p.erp), true).unwrap();
    let run = RunConfig { lr: 1e-3, epochs_source: 1, epochs_adapt: 0, batch_size: 2, seed: 7, ..RunConfig::default() };
    let mut st = TrainState::<f32>::new(run, 5).unwrap();
    st.run(&TrainData { source: &erp, target: &erp, val: None }, Some(dir.path())).unwrap();
    let loaded = TrainState::<f32>::load(&dir.path().join(CKPT_LAST)).unwrap();
    let shapes: Vec<Vec<usize>> = loaded.model.params.iter().map(|(_, _, t)| t.shape().to_vec()).collect();
    let mut worst = 0f64;
    let mut rng = Rng::new(77);
    for (h, w) in [(64, 128), (256, 512)] {
        let img = random_image::<f32>(&mut rng, h, w);
        let (probs, labels) = loaded.model.predict(&img, h, w).unwrap();
        if probs.shape() != [h * w, 5] || labels.len() != h * w {
            return outcome(false, format!("{h}x{w}: output shape {:?}", probs.shape()));
        }
        for row in probs.data().chunks(5) {
            worst = worst.max((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs());
        }
    }
    let after: Vec<Vec<usize>> = loaded.model.params.iter().map(|(_, _, t)| t.shape().to_vec()).collect();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && shapes == after,
        format!("trained at 128x256, inferred at 64x128 and 256x512, row-sum err {worst:.1e} (tol 1e-5), shapes unchanged, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 8

fn small_sets() -> (DomainSet, DomainSet) {
    let gen = GenConfig { seed: 8, pinhole_size: [32, 32], erp_size: [32, 64], ..GenConfig::default() };
    let pairs: Vec<_> = (0..2).map(|i| generate_pair(&gen, "train", i).unwrap()).collect();
    (
        DomainSet::from_samples(pairs.iter().map(|p| &p.pinhole), true).unwrap(),
        DomainSet::from_samples(pairs.iter().map(|p| &p.erp), false).unwrap(),
    )
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let (src, tgt) = small_sets();
    let data = TrainData { source: &src, target: &tgt, val: None };
    let mut done = Vec::new();
    for s in ["oooo", "sooo", "osoo", "ooso", "ooos", "soso", "osos"] {
        let run = RunConfig { structure: s.parse::<Structure>().unwrap(), neighborhood: 3, lr: 1e-3, epochs_source: 1, epochs_adapt: 0, batch_size: 2, ..RunConfig::default() };
        let mut st = TrainState::<f32>::new(run, 5).unwrap();
        match st.train_epoch(&data) {
            Ok(r) if r.loss_seg.is_finite() => done.push(s),
            other => return outcome(false, format!("structure {s}: {other:?}")),
        }
    }
    for pe in ["rpe", "ape", "none"] {
        let run = RunConfig { pe_mode: pe.parse().unwrap(), neighborhood: 3, lr: 1e-3, epochs_source: 1, epochs_adapt: 0, batch_size: 2, ..RunConfig::default() };
        let mut st = TrainState::<f32>::new(run, 5).unwrap();
        if let Err(e) = st.train_epoch(&data) {
            return outcome(false, format!("pe {pe}: {e}"));
        }
    }
    // gradient reaching the RPE tables of a DA stage
    let run = RunConfig { neighborhood: 3, ..RunConfig::default() };
    let st = TrainState::<f32>::new(run, 5).unwrap();
    let m = &st.model;
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape);
    let x = tape.constant(image_tensor::<f32>(&src.images[0], 32, 32).unwrap());
    let out = m.forward(&mut tape, &p, x, 32, 32).unwrap();
    let up = m.upsample_logits(&mut tape, out.logits, 32, 32).unwrap();
    let loss = tape.softmax_cross_entropy(up, &src.labels.as_ref().unwrap()[0], IGNORE).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let g = p.gradients(&mut grads);
    let rpe_norms: Vec<f64> = m
        .params
        .iter()
        .zip(&g)
        .filter(|((_, n, _), _)| n.ends_with(".rpe"))
        .map(|(_, g)| g.as_ref().map_or(0.0, |t| t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()))
        .collect();
    let rpe_ok = !rpe_norms.is_empty() && rpe_norms.iter().all(|&n| n > 0.0);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        done.len() == 7 && rpe_ok,
        format!(
            "{} structures trained one epoch, rpe/ape/none trained, {} RPE tables with min grad norm {:.2e}, {secs:.1}s",
            done.len(),
            rpe_norms.len(),
            rpe_norms.iter().cloned().fold(f64::INFINITY, f64::min)
        ),
    )
}

// ---------------------------------------------------------------- 9

fn files_equal(a: &Path, b: &Path) -> bool {
    let mut entries: Vec<_> = walk(a);
    entries.sort();
    entries.iter().all(|rel| fs::read(a.join(rel)).ok() == fs::read(b.join(rel)).ok()) && walk(b).len() == entries.len()
}

fn walk(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let (src, tgt) = small_sets();
    let data = TrainData { source: &src, target: &tgt, val: None };
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut ckpts = Vec::new();
    for _ in 0..2 {
        let run = RunConfig { neighborhood: 3, lr: 1e-3, epochs_source: 1, epochs_adapt: 1, batch_size: 2, seed: 9, ..RunConfig::default() };
        let mut st = TrainState::<f32>::new(run, 5).unwrap();
        st.run_until(&data, 1, Some(&out)).unwrap();
        ckpts.push(fs::read(out.join(CKPT_LAST)).unwrap());
    }
    let same_ckpt = ckpts[0] == ckpts[1];
    let round_trip = TrainState::<f32>::from_bytes(&ckpts[0]).unwrap().to_bytes().unwrap() == ckpts[0];
    let gen = GenConfig { seed: 11, n_train: 3, n_val: 2, pinhole_size: [32, 32], erp_size: [32, 64], ..GenConfig::default() };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&gen, &a).unwrap();
    generate_dataset(&gen, &b).unwrap();
    let same_data = files_equal(&a, &b);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        same_ckpt && round_trip && same_data,
        format!(
            "ckpt_last identical after one epoch {same_ckpt} ({} bytes), round trip bit-exact {round_trip}, dataset bytes identical {same_data} ({} files), {secs:.1}s",
            ckpts[0].len(),
            walk(&a).len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn set_oracle(pred: &[u8], gt: &[u8], k: usize) -> f64 {
    use std::collections::HashSet;
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        if g.is_empty() {
            continue;
        }
        let p: HashSet<usize> = (0..gt.len()).filter(|&i| pred[i] == c && gt[i] != IGNORE).collect();
        ious.push(g.intersection(&p).count() as f64 / g.union(&p).count() as f64);
    }
    if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 }
}

fn criterion_10() -> Outcome {
    let mut rng = Rng::new(1010);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = 2 + rng.below(8);
        let n = 1 + rng.below(500);
        let gt: Vec<u8> = (0..n).map(|_| if rng.below(12) == 0 { IGNORE } else { rng.below(k) as u8 }).collect();
        let pred: Vec<u8> = gt.iter().map(|&g| if g != IGNORE && rng.below(2) == 0 { g } else { rng.below(k) as u8 }).collect();
        if miou(&pred, &gt, k).unwrap() != set_oracle(&pred, &gt, k) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 random pairs, {mismatches} mismatches (exact equality)"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("DA equals masked full attention", criterion_1),
        ("full-window DA equals MHSA", criterion_2),
        ("gradient fidelity", criterion_3),
        ("distortion identities", criterion_4),
        ("parameter counts", criterion_5),
        ("toy UDA ordering", criterion_6),
        ("resolution robustness", criterion_7),
        ("ablation plumbing", criterion_8),
        ("determinism and serialization", criterion_9),
        ("metric oracle", criterion_10),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("criterion {n} SKIP {name}");
            continue;
        }
        let o = run();
        println!("criterion {n} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
