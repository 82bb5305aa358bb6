//! Source-then-adapt training loop with checkpointing and a per-epoch CSV log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use numkit::{AdamW, AdamWConfig, Rng, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::{self, NamedTensor};
use crate::config::RunConfig;
use crate::erpgeo::sig9;
use crate::error::{DatrError, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{build_model, Model, ModelConfig};
use crate::synthdata::DomainSet;
use crate::uda::{
    class_centers_tape, cfa_loss_tape, make_pseudo_labels, mixed_centers_tape, nearest_labels, poly_lr,
    seg_loss_logits, total_loss, ClassCenterBank, Domain, Phase,
};

pub const LOG_HEADER: &str = "phase,epoch,lr,loss_seg,loss_ss,loss_f,center_dist,miou_val";
pub const CKPT_LAST: &str = "ckpt_last.dtrc";
pub const CKPT_BEST: &str = "ckpt_best.dtrc";
pub const TRAIN_LOG: &str = "train_log.csv";

/// One row of the training log. Missing measurements are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub loss_seg: f64,
    pub loss_ss: f64,
    pub loss_f: f64,
    pub center_dist: Option<f64>,
    pub miou_val: Option<f64>,
}

fn opt_num(v: Option<f64>) -> String {
    v.map(sig9).unwrap_or_else(|| "nan".into())
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.phase.as_str(),
            self.epoch,
            sig9(self.lr),
            sig9(self.loss_seg),
            sig9(self.loss_ss),
            sig9(self.loss_f),
            opt_num(self.center_dist),
            opt_num(self.miou_val)
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Labeled source images, unlabeled target images and an optional labeled
/// target validation split.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a DomainSet,
    pub target: &'a DomainSet,
    pub val: Option<&'a DomainSet>,
}

impl TrainData<'_> {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(DatrError::Config("source and target training sets must be non-empty".into()));
        }
        let labels = self
            .source
            .labels
            .as_ref()
            .ok_or_else(|| DatrError::Config("source split has no labels".into()))?;
        check_classes(labels, classes, "source")?;
        if let Some(val) = self.val {
            let l = val
                .labels
                .as_ref()
                .ok_or_else(|| DatrError::Config("validation split has no target labels".into()))?;
            check_classes(l, classes, "validation")?;
        }
        Ok(())
    }
}

fn check_classes(labels: &[Vec<u8>], classes: usize, what: &str) -> Result<()> {
    let max = labels
        .iter()
        .flat_map(|l| l.iter().copied())
        .filter(|&l| l != crate::uda::IGNORE)
        .max()
        .unwrap_or(0);
    if max as usize >= classes {
        return Err(DatrError::Config(format!(
            "{what} labels reach class {max} but the model has {classes} classes"
        )));
    }
    Ok(())
}

pub fn image_tensor<T: Scalar>(img: &[f32], h: usize, w: usize) -> Result<Tensor<T>> {
    Ok(Tensor::from_vec(&[h * w, 3], img.iter().map(|&v| T::from_f64(v as f64)).collect())?)
}

fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.last_dim();
    let mut out = Tensor::zeros(logits.shape());
    numkit::kernels::softmax_rows(logits.data(), k, out.data_mut());
    out
}

#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    seg: f64,
    ss: f64,
    f: f64,
    /// Bank center distance after this step's update, when measurable.
    dist: Option<f64>,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub run: RunConfig,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub bank: ClassCenterBank,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_miou: Option<f64>,
    pub log: Vec<LogRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(run: RunConfig, classes: usize) -> Result<Self> {
        run.validate()?;
        let cfg = run.model_config(classes);
        Self::with_model_config(run, cfg)
    }

    pub fn with_model_config(run: RunConfig, cfg: ModelConfig) -> Result<Self> {
        run.validate()?;
        let model = build_model::<T>(&cfg, &mut Rng::derived(run.seed, 1))?;
        let opt = AdamW::new(&model.params, AdamWConfig::default());
        let bank = ClassCenterBank::new(cfg.num_classes, cfg.decoder_dim);
        Ok(Self {
            rng: Rng::derived(run.seed, 2),
            run,
            model,
            opt,
            bank,
            epoch: 0,
            step: 0,
            best_miou: None,
            log: Vec::new(),
        })
    }

    pub fn classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn phase_of(&self, epoch_index: usize) -> Phase {
        if epoch_index < self.run.epochs_source {
            Phase::SourceOnly
        } else {
            Phase::Adapt
        }
    }

    pub fn steps_per_epoch(&self, n_source: usize) -> usize {
        n_source.div_ceil(self.run.batch_size)
    }

    fn forward_image(
        &self,
        tape: &mut Tape<T>,
        p: &numkit::Binding,
        img: &[f32],
        h: usize,
        w: usize,
    ) -> Result<(Var, crate::model::DecoderOutput)> {
        let x = tape.constant(image_tensor(img, h, w)?);
        let out = self.model.forward(tape, p, x, h, w)?;
        let up = self.model.upsample_logits(tape, out.logits, h, w)?;
        Ok((up, out))
    }

    fn batch_step(&mut self, data: &TrainData, src: &[usize], tgt: &[usize], phase: Phase, lr: f64) -> Result<StepStats> {
        let k = self.classes();
        let weights = self.run.loss_weights();
        let adapt = phase == Phase::Adapt && (weights.lambda_ss > 0.0 || weights.lambda_f > 0.0);
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);

        let (sh, sw) = (data.source.height, data.source.width);
        let src_labels = data.source.labels.as_ref().expect("validated");
        let mut seg_terms = Vec::with_capacity(src.len());
        let mut src_maps: Vec<(Var, Vec<u8>)> = Vec::new();
        for &i in src {
            let (up, out) = self.forward_image(&mut tape, &p, &data.source.images[i], sh, sw)?;
            seg_terms.push(seg_loss_logits(&mut tape, up, &src_labels[i])?);
            if adapt {
                let f = out.fused;
                src_maps.push((f.var, nearest_labels(&src_labels[i], sh, sw, f.h, f.w)));
            }
        }
        let seg = mean_of(&mut tape, &seg_terms)?;

        let mut ss = None;
        let mut lf = None;
        let mut current: Option<(Var, Vec<bool>, Var, Vec<bool>)> = None;
        if adapt {
            let (th, tw) = (data.target.height, data.target.width);
            let mut ss_terms = Vec::with_capacity(tgt.len());
            let mut tgt_maps: Vec<(Var, Vec<u8>)> = Vec::new();
            for &i in tgt {
                let (up, out) = self.forward_image(&mut tape, &p, &data.target.images[i], th, tw)?;
                let probs = softmax_probs(tape.value(up));
                let pl = make_pseudo_labels(&probs, self.run.threshold)?;
                ss_terms.push(seg_loss_logits(&mut tape, up, &pl.labels)?);
                let f = out.fused;
                tgt_maps.push((f.var, nearest_labels(&pl.labels, th, tw, f.h, f.w)));
            }
            ss = Some(mean_of(&mut tape, &ss_terms)?);
            let sm: Vec<(Var, &[u8])> = src_maps.iter().map(|(v, l)| (*v, l.as_slice())).collect();
            let tm: Vec<(Var, &[u8])> = tgt_maps.iter().map(|(v, l)| (*v, l.as_slice())).collect();
            let (s_cur, vs) = class_centers_tape(&mut tape, &sm, k)?;
            let (t_cur, vt) = class_centers_tape(&mut tape, &tm, k)?;
            if weights.lambda_f > 0.0 {
                let e = self.adapt_epoch();
                let (s_mix, vs2) = mixed_centers_tape(&mut tape, &self.bank, Domain::Source, s_cur, &vs, e)?;
                let (t_mix, vt2) = mixed_centers_tape(&mut tape, &self.bank, Domain::Target, t_cur, &vt, e)?;
                lf = Some(cfa_loss_tape(&mut tape, s_mix, &vs2, t_mix, &vt2)?);
            }
            current = Some((s_cur, vs, t_cur, vt));
        }

        let loss = total_loss(&mut tape, phase, weights, seg, ss, lf)?;
        let mut stats = StepStats {
            seg: tape.value(seg).item().to_f64(),
            ss: ss.map_or(0.0, |v| tape.value(v).item().to_f64()),
            f: lf.map_or(0.0, |v| tape.value(v).item().to_f64()),
            dist: None,
        };
        let value = tape.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(DatrError::Domain(format!("non-finite training loss at step {}", self.step)));
        }
        let mut grads = tape.backward(loss)?;
        let g = p.gradients(&mut grads);
        self.opt.step(&mut self.model.params, &g, lr)?;
        if let Some((s_cur, vs, t_cur, vt)) = current {
            let to64 = |v: Var| tape.value(v).data().iter().map(|x| x.to_f64()).collect::<Vec<_>>();
            let e = self.adapt_epoch();
            self.bank.update_domain(Domain::Source, &to64(s_cur), &vs, e)?;
            self.bank.update_domain(Domain::Target, &to64(t_cur), &vt, e)?;
            if !self.bank.shared_classes().is_empty() {
                stats.dist = Some(self.bank.center_distance());
            }
        }
        Ok(stats)
    }

    /// 1-based epoch index within the adaptation phase.
    fn adapt_epoch(&self) -> usize {
        (self.epoch + 1).saturating_sub(self.run.epochs_source).max(1)
    }

    /// Run one epoch and append its log row.
    pub fn train_epoch(&mut self, data: &TrainData) -> Result<LogRow> {
        data.validate(self.classes())?;
        let phase = self.phase_of(self.epoch);
        let bs = self.run.batch_size;
        let n_src = data.source.len();
        let n_tgt = data.target.len();
        let steps = self.steps_per_epoch(n_src);
        let total = steps * self.run.total_epochs();
        let mut src_order: Vec<usize> = (0..n_src).collect();
        self.rng.shuffle(&mut src_order);
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        self.rng.shuffle(&mut tgt_order);
        let mut sums = StepStats::default();
        let mut lr = 0.0;
        let (mut dist_sum, mut dist_n) = (0.0, 0usize);
        for s in 0..steps {
            let src: Vec<usize> = src_order[s * bs..((s + 1) * bs).min(n_src)].to_vec();
            let tgt: Vec<usize> = (0..src.len()).map(|t| tgt_order[(s * bs + t) % n_tgt]).collect();
            lr = poly_lr(self.step as usize, total, self.run.lr);
            let st = self.batch_step(data, &src, &tgt, phase, lr)?;
            sums.seg += st.seg;
            sums.ss += st.ss;
            sums.f += st.f;
            if let Some(d) = st.dist {
                dist_sum += d;
                dist_n += 1;
            }
            self.step += 1;
        }
        let n = steps.max(1) as f64;
        let miou_val = match data.val {
            Some(v) => Some(self.evaluate(v)?.miou()),
            None => None,
        };
        let row = LogRow {
            phase,
            epoch: self.epoch + 1,
            lr,
            loss_seg: sums.seg / n,
            loss_ss: sums.ss / n,
            loss_f: sums.f / n,
            // mean over the epoch's steps, like the loss columns
            center_dist: (dist_n > 0).then(|| dist_sum / dist_n as f64),
            miou_val,
        };
        self.epoch += 1;
        if let Some(m) = miou_val {
            if self.best_miou.is_none_or(|b| m > b) {
                self.best_miou = Some(m);
            }
        }
        log::info!("{}", row.csv());
        self.log.push(row.clone());
        Ok(row)
    }

    /// Train until `until` epochs are complete, writing `ckpt_last`,
    /// `ckpt_best` and the log into `out` after every epoch when given.
    pub fn run_until(&mut self, data: &TrainData, until: usize, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| DatrError::io(dir, e))?;
        }
        while self.epoch < until.min(self.run.total_epochs()) {
            let before = self.best_miou;
            let row = self.train_epoch(data)?;
            if let Some(dir) = out {
                self.save(&dir.join(CKPT_LAST))?;
                if row.miou_val.is_some() && self.best_miou != before {
                    self.save(&dir.join(CKPT_BEST))?;
                }
                let p = dir.join(TRAIN_LOG);
                fs::write(&p, log_csv(&self.log)).map_err(|e| DatrError::io(&p, e))?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, data: &TrainData, out: Option<&Path>) -> Result<()> {
        self.run_until(data, self.run.total_epochs(), out)
    }

    /// Confusion matrix of the current weights on a labeled split.
    pub fn evaluate(&self, set: &DomainSet) -> Result<ConfusionMatrix> {
        evaluate(&self.model, set)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, tensors) = self.encode_parts()?;
        checkpoint::encode(header, &tensors)
    }

    fn encode_parts(&self) -> Result<(Map<String, Value>, Vec<NamedTensor>)> {
        let mut h = Map::new();
        h.insert("config".into(), to_json(&self.run)?);
        h.insert("model".into(), to_json(&self.model.cfg)?);
        h.insert("epoch".into(), Value::from(self.epoch));
        h.insert("phase".into(), to_json(&self.phase_of(self.epoch.saturating_sub(1)))?);
        h.insert("step".into(), Value::from(self.step));
        h.insert("best_miou".into(), to_json(&self.best_miou)?);
        h.insert("bank".into(), to_json(&self.bank)?);
        h.insert("rng".into(), to_json(&self.rng)?);
        let c = self.opt.config;
        h.insert(
            "optimizer".into(),
            to_json(&OptimizerHeader {
                step: self.opt.step,
                beta1: c.beta1,
                beta2: c.beta2,
                eps: c.eps,
                weight_decay: c.weight_decay,
            })?,
        );
        h.insert("log".into(), to_json(&self.log)?);
        let mut tensors = Vec::with_capacity(3 * self.model.params.len());
        for (_, name, t) in self.model.params.iter() {
            tensors.push(NamedTensor::from_tensor(format!("param/{name}"), t));
        }
        for (i, (_, name, _)) in self.model.params.iter().enumerate() {
            tensors.push(NamedTensor::from_tensor(format!("adam_m/{name}"), &self.opt.first[i]));
            tensors.push(NamedTensor::from_tensor(format!("adam_v/{name}"), &self.opt.second[i]));
        }
        Ok((h, tensors))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| DatrError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut h, tensors) = checkpoint::decode(bytes)?;
        let mut take = |k: &str| h.remove(k).ok_or_else(|| DatrError::Format(format!("checkpoint header lacks {k:?}")));
        let run: RunConfig = from_json(take("config")?)?;
        let cfg: ModelConfig = from_json(take("model")?)?;
        let epoch: usize = from_json(take("epoch")?)?;
        let step: u64 = from_json(take("step")?)?;
        let best_miou: Option<f64> = from_json(take("best_miou")?)?;
        let bank: ClassCenterBank = from_json(take("bank")?)?;
        let rng: Rng = from_json(take("rng")?)?;
        let oh: OptimizerHeader = from_json(take("optimizer")?)?;
        let log: Vec<LogRow> = from_json(take("log")?)?;
        let mut state = Self::with_model_config(run, cfg)?;
        let mut by_name: std::collections::HashMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let ids: Vec<_> = state.model.params.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (i, (id, name)) in ids.iter().enumerate() {
            let mut get = |prefix: &str| {
                by_name
                    .remove(format!("{prefix}/{name}").as_str())
                    .ok_or_else(|| DatrError::Integrity(format!("checkpoint lacks tensor {prefix}/{name}")))
                    .and_then(|t| t.to_tensor::<T>())
            };
            let value = get("param")?;
            let m = get("adam_m")?;
            let v = get("adam_v")?;
            state
                .model
                .params
                .set(*id, value)
                .map_err(|e| DatrError::Integrity(format!("tensor param/{name}: {e}")))?;
            if m.shape() != state.opt.first[i].shape() || v.shape() != state.opt.second[i].shape() {
                return Err(DatrError::Integrity(format!("optimizer moments for {name} have the wrong shape")));
            }
            state.opt.first[i] = m;
            state.opt.second[i] = v;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(DatrError::Integrity(format!("checkpoint has unexpected tensor {extra}")));
        }
        state.opt.step = oh.step;
        state.opt.config = AdamWConfig {
            beta1: oh.beta1,
            beta2: oh.beta2,
            eps: oh.eps,
            weight_decay: oh.weight_decay,
        };
        if bank.classes != state.classes() || bank.dim != state.model.cfg.decoder_dim {
            return Err(DatrError::Integrity("center bank does not match the model".into()));
        }
        state.bank = bank;
        state.rng = rng;
        state.epoch = epoch;
        state.step = step;
        state.best_miou = best_miou;
        state.log = log;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DatrError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            DatrError::Integrity(m) => DatrError::Integrity(format!("{}: {m}", path.display())),
            DatrError::Format(m) => DatrError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn to_json<S: Serialize>(v: &S) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| DatrError::Format(e.to_string()))
}

fn from_json<D: serde::de::DeserializeOwned>(v: Value) -> Result<D> {
    serde_json::from_value(v).map_err(|e| DatrError::Format(format!("checkpoint header: {e}")))
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| DatrError::Domain("empty batch".into()))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64)?)
}

/// Confusion matrix of `model` over a labeled split.
pub fn evaluate<T: Scalar>(model: &Model<T>, set: &DomainSet) -> Result<ConfusionMatrix> {
    let labels = set
        .labels
        .as_ref()
        .ok_or_else(|| DatrError::Config("evaluation split has no labels".into()))?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (img, lab) in set.images.iter().zip(labels) {
        let (_, pred) = model.predict(&image_tensor(img, set.height, set.width)?, set.height, set.width)?;
        cm.update(&pred, lab)?;
    }
    Ok(cm)
}
