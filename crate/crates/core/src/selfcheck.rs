//! Built-in oracle suite: neighborhood attention against masked full
//! attention, full-window degeneration, finite-difference gradients,
//! distortion identities and preset parameter counts.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::rc::Rc;

use numkit::{grad_check, rng_normal, Binding, NumError, ParamStore, PatchGeometry, ResizeGeometry, Rng, Scalar, Tape, Tensor, Var};

use crate::attention::{mhsa_reference, neighbor_table, DaConfig, DaLayer, PeMode};
use crate::erpgeo::{format_sig, ErpSpec};
use crate::error::Result;
use crate::model::{build_model, random_image, ModelConfig, Variant};

/// Deliberate corruption used to confirm that a check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Relative positional table with one extra slot.
    RpeShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst error seen; `NaN` when the check could not run.
    pub measured: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, tolerance: f64, outcome: Result<(f64, String)>) -> Self {
        match outcome {
            Ok((measured, detail)) => Self {
                name,
                tolerance,
                measured,
                passed: measured <= tolerance,
                detail,
            },
            Err(e) => Self {
                name,
                tolerance,
                measured: f64::NAN,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

/// Plain-text table of results.
pub fn report(results: &[CheckResult]) -> String {
    let mut s = format!("{:<26} {:>6} {:>10} {:>12}  detail\n", "check", "status", "tolerance", "measured");
    for r in results {
        let _ = writeln!(
            s,
            "{:<26} {:>6} {:>10} {:>12}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            format_sig(r.tolerance, 3),
            format_sig(r.measured, 3),
            r.detail
        );
    }
    s
}

pub fn run(fault: Option<Fault>) -> Vec<CheckResult> {
    vec![
        CheckResult::new("da_vs_masked_attention", 1e-10, da_vs_masked::<f64>(fault, 0)),
        CheckResult::new("da_vs_masked_attention_f32", 1e-5, da_vs_masked::<f32>(fault, 1)),
        CheckResult::new("full_window_vs_mhsa", 1e-10, full_window_vs_mhsa()),
        CheckResult::new("op_gradients", 1e-4, op_gradients(fault)),
        CheckResult::new("model_gradient", 1e-4, model_gradient()),
        CheckResult::new("distortion_identities", 1e-12, distortion_identities()),
        CheckResult::new("preset_param_counts", 0.15, param_counts()),
    ]
}

/// Masked full attention: every key is scored, keys outside the window get
/// zero weight, and each kept key's value is offset by its window-slot RPE.
pub fn masked_attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rpe: Option<&[f64]>,
    h: usize,
    w: usize,
    cfg: &DaConfig,
) -> Vec<f64> {
    let (heads, d) = (cfg.heads, cfg.d_head);
    let c = heads * d;
    let n = h * w;
    let eh = cfg.window_h.min(h);
    let wrap = cfg.wrap_horizontal && cfg.window_w < w;
    let ew = cfg.window_w.min(w);
    let mut out = vec![0.0; n * c];
    for i in 0..h {
        let r0 = (i as isize - (cfg.window_h / 2) as isize).clamp(0, (h - eh) as isize) as usize;
        for j in 0..w {
            let c0 = (j as isize - (cfg.window_w / 2) as isize).clamp(0, (w - ew) as isize) as usize;
            // slot of key (r, col), or None outside the window
            let slot = |r: usize, col: usize| -> Option<usize> {
                if r < r0 || r >= r0 + eh {
                    return None;
                }
                let dc = if wrap {
                    (col + 2 * w + cfg.window_w / 2 - j) % w
                } else if col >= c0 {
                    col - c0
                } else {
                    return None;
                };
                (dc < if wrap { cfg.window_w } else { ew }).then(|| (r - r0) * cfg.window_w + dc)
            };
            let qi = i * w + j;
            for hd in 0..heads {
                let mut scores = vec![f64::NEG_INFINITY; n];
                for (key, s) in scores.iter_mut().enumerate() {
                    if slot(key / w, key % w).is_some() {
                        *s = (0..d).map(|t| q[qi * c + hd * d + t] * k[key * c + hd * d + t]).sum::<f64>() * cfg.scale();
                    }
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for key in 0..n {
                    let Some(sl) = slot(key / w, key % w) else { continue };
                    let p = (scores[key] - m).exp() / z;
                    for t in 0..d {
                        let pe = rpe.map_or(0.0, |r| r[(hd * cfg.slots() + sl) * d + t]);
                        out[qi * c + hd * d + t] += p * (v[key * c + hd * d + t] + pe);
                    }
                }
            }
        }
    }
    out
}

fn da_vs_masked<T: Scalar>(fault: Option<Fault>, stream: u64) -> Result<(f64, String)> {
    let mut rng = Rng::derived(77, stream);
    let mut worst: f64 = 0.0;
    let cases = 25;
    for _ in 0..cases {
        let h = 4 + rng.below(6);
        let w = 4 + rng.below(6);
        let heads = 1 + rng.below(2);
        let c = [4, 8][rng.below(2)];
        let win = [1, 3, 5][rng.below(3)];
        let cfg = DaConfig {
            window_h: win,
            window_w: win,
            heads,
            d_head: c / heads,
            pe_mode: PeMode::Rpe,
            wrap_horizontal: rng.below(2) == 1,
        };
        let n = h * w;
        let q: Tensor<f64> = rng_normal(&mut rng, &[n, c], 1.0);
        let k: Tensor<f64> = rng_normal(&mut rng, &[n, c], 1.0);
        let v: Tensor<f64> = rng_normal(&mut rng, &[n, c], 1.0);
        let extra = usize::from(fault == Some(Fault::RpeShape));
        let rpe: Tensor<f64> = rng_normal(&mut rng, &[heads, cfg.slots() + extra, cfg.d_head], 0.5);
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = [&q, &k, &v, &rpe].iter().map(|t| tape.constant(t.cast())).collect();
        let table = Rc::new(neighbor_table(h, w, &cfg)?);
        let out = tape.neighborhood_attention(vars[0], vars[1], vars[2], Some(vars[3]), table, heads, cfg.scale())?;
        let expect = masked_attention_oracle(q.data(), k.data(), v.data(), Some(rpe.data()), h, w, &cfg);
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            worst = worst.max((a.to_f64() - b).abs());
        }
    }
    Ok((worst, format!("{cases} random instances, H,W in 4..9, windows 1/3/5")))
}

fn full_window_vs_mhsa() -> Result<(f64, String)> {
    let mut rng = Rng::new(78);
    let mut store = ParamStore::<f64>::new();
    let (h, w) = (5, 7);
    let cfg = DaConfig { window_h: 11, window_w: 11, heads: 2, d_head: 4, pe_mode: PeMode::Rpe, wrap_horizontal: false };
    let da = DaLayer::new(&mut store, "da", cfg, &mut rng)?;
    if let Some(r) = da.rpe {
        store.get_mut(r).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(rng_normal(&mut rng, &[h * w, 8], 1.0));
    let a = da.forward(&mut tape, &p, x, h, w)?;
    let b = mhsa_reference(&mut tape, &p, &da.attn, x)?;
    Ok((tape.value(a).max_abs_diff(tape.value(b)), format!("{h}x{w} map, 11x11 window, zero RPE")))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> numkit::Result<Var>>;

/// Random-weighted sum so every output element carries a distinct gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> numkit::Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rng_normal(&mut Rng::new(seed), &shape, 1.0));
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn op_cases(fault: Option<Fault>) -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let extra = usize::from(fault == Some(Fault::RpeShape));
    let da = DaConfig { window_h: 3, window_w: 3, heads: 2, d_head: 2, pe_mode: PeMode::Rpe, wrap_horizontal: true };
    let table = Rc::new(neighbor_table(3, 4, &da).expect("valid table"));
    let labels: Vec<u8> = vec![0, 2, 1, 255, 2, 0];
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, 1) })),
        ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], Box::new(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; project(t, y, 2) })),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| { let y = t.softmax(v[0], 1)?; project(t, y, 3) })),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|t, v| { let y = t.layernorm(v[0], v[1], v[2], 1e-6)?; project(t, y, 4) })),
        ("gelu", vec![vec![4, 3]], Box::new(|t, v| { let y = t.gelu(v[0])?; project(t, y, 5) })),
        (
            "unfold",
            vec![vec![20, 2]],
            Box::new(|t, v| {
                let g = PatchGeometry::conv(4, 5, 2, 3, 2, 1)?;
                let y = t.unfold(v[0], g)?;
                project(t, y, 6)
            }),
        ),
        (
            "resize_bilinear",
            vec![vec![6, 2]],
            Box::new(|t, v| {
                let g = ResizeGeometry { in_h: 2, in_w: 3, channels: 2, out_h: 5, out_w: 4 };
                let y = t.resize_bilinear(v[0], g)?;
                project(t, y, 7)
            }),
        ),
        (
            "neighborhood_attention",
            vec![vec![12, 4], vec![12, 4], vec![12, 4], vec![2, 9 + extra, 2]],
            Box::new(move |t, v| {
                let y = t.neighborhood_attention(v[0], v[1], v[2], Some(v[3]), table.clone(), 2, da.scale())?;
                project(t, y, 8)
            }),
        ),
        (
            "attention",
            vec![vec![5, 4], vec![3, 4], vec![3, 4]],
            Box::new(|t, v| { let y = t.attention(v[0], v[1], v[2], 2, 0.7)?; project(t, y, 9) }),
        ),
        ("cross_entropy", vec![vec![6, 3]], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels, 255))),
    ]
}

fn op_gradients(fault: Option<Fault>) -> Result<(f64, String)> {
    let mut rng = Rng::new(79);
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for (name, shapes, f) in op_cases(fault) {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rng_normal(&mut rng, s, 1.0)).collect();
        let r = grad_check(&*f, &inputs, 1e-3).map_err(|e| NumError::Oracle(format!("{name}: {e}")))?;
        worst = worst.max(r.max_rel_error);
        names.push(name);
    }
    Ok((worst, names.join(" ")))
}

fn model_gradient() -> Result<(f64, String)> {
    let mut cfg = ModelConfig::custom(Variant::M, [4, 4, 8, 4], [1, 1, 1, 1], [1, 1, 2, 2], 4, 3);
    cfg.window = 3;
    for st in &mut cfg.stages {
        st.mlp_ratio = 2;
    }
    let mut rng = Rng::new(80);
    let m = build_model::<f64>(&cfg, &mut rng)?;
    let img = random_image::<f64>(&mut rng, 32, 32);
    let labels: Vec<u8> = (0..32 * 32).map(|_| rng.below(3) as u8).collect();
    let params: Vec<Tensor<f64>> = m
        .params
        .iter()
        .map(|(_, _, t)| {
            let noise = rng_normal::<f64>(&mut rng, t.shape(), 0.4);
            Tensor::from_vec(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
                .expect("same shape")
        })
        .collect();
    let r = grad_check(
        |tape, vars| {
            let p = Binding::from_vars(vars.to_vec());
            let x = tape.constant(img.clone());
            let out = m.forward(tape, &p, x, 32, 32).map_err(|e| NumError::Oracle(e.to_string()))?;
            let up = m.upsample_logits(tape, out.logits, 32, 32).map_err(|e| NumError::Oracle(e.to_string()))?;
            tape.softmax_cross_entropy(up, &labels, 255)
        },
        &params,
        1e-3,
    )?;
    let name = m.params.iter().nth(r.param).map(|(_, n, _)| n.to_string()).unwrap_or_default();
    Ok((
        r.max_rel_error,
        format!(
            "{} parameters, worst {name}[{}]: {:e} vs {:e}",
            m.param_count(),
            r.index,
            r.analytic,
            r.numeric
        ),
    ))
}

fn distortion_identities() -> Result<(f64, String)> {
    let mut rng = Rng::new(81);
    let mut worst: f64 = 0.0;
    let width = 256.0;
    let n = 256;
    let eq = ErpSpec::new(width, n, 4, ErpSpec::equator(width));
    worst = worst.max(eq.distortion_coefficient()?.abs());
    for _ in 0..1000 {
        let h = rng.uniform() * width / PI;
        let np = 1 + rng.below(16);
        let s = ErpSpec::new(width, n, np, h);
        let dis = s.distortion_coefficient()?;
        let direct = np as f64 * (width / n as f64 - s.pixel_width()?);
        worst = worst.max((dis - direct).abs());
        let doubled = ErpSpec::new(width, n, 2 * np, h).distortion_coefficient()?;
        if doubled != 2.0 * dis {
            return Err(crate::DatrError::Domain(format!("Dis(2n') != 2 Dis(n') at h={h}")));
        }
        if s.pixel_width()? > s.erp_pixel_width() + 1e-12 {
            return Err(crate::DatrError::Domain(format!("pixel width exceeds W/n at h={h}")));
        }
    }
    // worked example: W = 2 pi, n = 8, n' = 4, h = 0.5, from the circle at
    // that height on the unit sphere
    let worked = ErpSpec::new(TAU, 8, 4, 0.5).distortion_coefficient()?;
    let z = 1.0 - 0.5;
    let radius = (1.0 - z * z).sqrt();
    let sphere = 4.0 * (TAU / 8.0) * (1.0 - radius);
    worst = worst.max((worked - sphere).abs());
    Ok((worst, format!("equator, 1000 random h, worked value {}", format_sig(worked, 6))))
}

fn param_counts() -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (variant, millions) in [(Variant::M, 4.64), (Variant::T, 14.72), (Variant::S, 25.76)] {
        let m = build_model::<f32>(&ModelConfig::preset(variant, 19), &mut Rng::new(0))?;
        let got = m.param_count() as f64 / 1e6;
        worst = worst.max((got / millions - 1.0).abs());
        parts.push(format!("{variant} {got:.2}M/{millions}M"));
    }
    Ok((worst, parts.join(", ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_handles_wrapped_window() {
        let cfg = DaConfig { window_h: 1, window_w: 3, heads: 1, d_head: 1, pe_mode: PeMode::Rpe, wrap_horizontal: true };
        // uniform scores: output is the mean of the three wrapped neighbors
        let q = vec![0.0; 5];
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let out = masked_attention_oracle(&q, &q, &v, None, 1, 5, &cfg);
        assert!((out[0] - (5.0 + 1.0 + 2.0) / 3.0).abs() < 1e-12);
        assert!((out[4] - (4.0 + 5.0 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rpe_fault_is_reported_by_name() {
        let results = run(Some(Fault::RpeShape));
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert!(failed.contains(&"da_vs_masked_attention"), "{failed:?}");
        assert!(failed.contains(&"op_gradients"));
        assert!(report(&results).contains("FAIL"));
    }
}
