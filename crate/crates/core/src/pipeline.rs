//! End-to-end model: backbone plus the branches selected by a setup,
//! training with early stopping, inference and per-page evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{receptive_field, Backbone, BackboneConfig, LayerGeom, INPUT_MULTIPLE};
use crate::detect::{
    assign_targets, cls_loss_node, detect, iou, reg_loss_node, AnchorSet, BBox, DetectConfig,
    DetectHead, Detection,
};
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{
    average_precision, f1, match_detections, match_entities, CerAccumulator, MetricCounts,
};
use crate::ner::{
    argmax_rows, reading_order, tag_loss, word_crops, NerConfig, SeqTagger, TagSet, WordClassifier,
    WordClassifierConfig,
};
use crate::param::{OptimizerConfig, OptimizerState, ParamStore};
use crate::recog::{ctc_loss_node, greedy_decode, Alphabet, CtcStats, RecogConfig, RecogHead};
use crate::roi::{pool, PoolConfig};
use crate::scalar::Scalar;
use crate::synth::PageSample;
use crate::tensor::Tensor;

/// Format version written into checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which branches are trained and how entities are tagged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetupKind {
    /// Detection, transcription, tags as detection classes.
    A,
    /// Detection, transcription, sequential tagger.
    B,
    /// Detection and sequential tagger, no transcription.
    C,
    /// Detection and transcription only.
    D,
    /// Detection plus a context-free classifier on word crops.
    #[serde(rename = "baseline")]
    Baseline,
}

impl SetupKind {
    pub fn name(self) -> &'static str {
        match self {
            SetupKind::A => "A",
            SetupKind::B => "B",
            SetupKind::C => "C",
            SetupKind::D => "D",
            SetupKind::Baseline => "baseline",
        }
    }

    pub fn has_recog(self) -> bool {
        matches!(self, SetupKind::A | SetupKind::B | SetupKind::D)
    }

    pub fn has_tagger(self) -> bool {
        matches!(self, SetupKind::B | SetupKind::C)
    }

    pub fn tags_entities(self) -> bool {
        self != SetupKind::D
    }
}

impl core::str::FromStr for SetupKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(SetupKind::A),
            "B" | "b" => Ok(SetupKind::B),
            "C" | "c" => Ok(SetupKind::C),
            "D" | "d" => Ok(SetupKind::D),
            "baseline" => Ok(SetupKind::Baseline),
            _ => Err(Error::InvalidArgument(format!("unknown setup `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerSection {
    pub max_len: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub classifier: WordClassifierConfig,
}

impl Default for NerSection {
    fn default() -> Self {
        let n = NerConfig::default();
        NerSection {
            max_len: n.max_len,
            hidden: n.hidden,
            kernel: n.kernel,
            classifier: WordClassifierConfig::default(),
        }
    }
}

impl NerSection {
    pub fn tagger(&self) -> NerConfig {
        NerConfig {
            max_len: self.max_len,
            hidden: self.hidden,
            kernel: self.kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerConfig,
    /// Weights of detection classification, box regression, transcription
    /// and tagging losses.
    pub loss_weights: [f64; 4],
    /// Ground-truth boxes feed transcription and tagging until validation
    /// AP exceeds this value.
    pub teacher_forcing_ap: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Training pages are translated by up to this many pixels per step.
    pub shift_augment: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            patience: 20,
            max_steps: None,
            optimizer: OptimizerConfig::Adam {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            loss_weights: [1.0; 4],
            teacher_forcing_ap: 0.5,
            grad_clip: Some(10.0),
            shift_augment: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub alphabet: String,
    pub tags: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            alphabet: Alphabet::default_latin().as_string(),
            tags: TagSet::default().tags().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub detect: DetectConfig,
    pub pool: PoolConfig,
    pub recog: RecogConfig,
    pub ner: NerSection,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backbone: BackboneConfig::desk(),
            detect: DetectConfig {
                ratios: vec![0.15, 0.35, 0.8],
                ..DetectConfig::default()
            },
            pool: PoolConfig::default(),
            recog: RecogConfig {
                channels: 32,
                conv_blocks: 2,
            },
            ner: NerSection::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn full_scale() -> Self {
        PipelineConfig {
            backbone: BackboneConfig::full_scale(),
            detect: DetectConfig::full_scale(),
            recog: RecogConfig::full_scale(),
            train: TrainConfig {
                patience: 100,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(&self.data.alphabet)
    }

    pub fn tag_set(&self) -> Result<TagSet> {
        TagSet::try_from(self.data.tags.clone())
    }

    pub fn rf_layers(&self) -> Vec<LayerGeom> {
        self.backbone.rf_layer_list(self.detect.head_convs)
    }

    /// Receptive field of one detection output, in input pixels.
    pub fn receptive_field(&self) -> Result<i64> {
        receptive_field(&self.rf_layers()).map(|r| r.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.alphabet()?;
        self.tag_set()?;
        if self.detect.ratios.is_empty() || self.detect.scales.is_empty() {
            bail!(
                InvalidArgument,
                "anchor ratios and scales must be non-empty"
            );
        }
        if self
            .train
            .loss_weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            bail!(
                InvalidArgument,
                "loss weights must be finite and non-negative"
            );
        }
        if self.pool.stride != crate::backbone::PYRAMID_STRIDES[0] {
            bail!(
                InvalidArgument,
                "pooling reads the stride-{} level",
                crate::backbone::PYRAMID_STRIDES[0]
            );
        }
        Ok(())
    }
}

/// A page prepared for the network.
#[derive(Clone, Debug)]
pub struct PreparedPage {
    /// Ink in `[0, 1]`, padded with zeros to a multiple of 128.
    pub ink: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
    pub texts: Vec<String>,
    pub targets: Vec<Vec<usize>>,
    pub tags: Vec<usize>,
}

/// Zero-pads an ink image to the next multiple of 128 on both axes.
pub fn pad_ink(ink: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let ph = h.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
    let pw = w.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
    let mut out = vec![0.0f32; ph * pw];
    for y in 0..h {
        out[y * pw..y * pw + w].copy_from_slice(&ink[y * w..(y + 1) * w]);
    }
    (out, ph, pw)
}

/// One word found on a page.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordPrediction {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tag: Option<String>,
}

/// Loss terms of one page.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub ctc: f64,
    pub ner: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.ctc += o.ctc;
        self.ner += o.ner;
        self.total += o.total;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.cls *= c;
        self.reg *= c;
        self.ctc *= c;
        self.ner *= c;
        self.total *= c;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train: LossParts,
    pub valid_loss: f64,
    pub valid_ap: f64,
    pub teacher_forcing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
    pub ctc_calls: usize,
    pub ctc_infeasible: usize,
    pub history: Vec<EpochLog>,
}

/// Progress of a training run, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub report: TrainReport,
    pub since_best: usize,
    pub teacher_forcing: bool,
    pub finished: bool,
    pub optimizer: OptimizerState,
    /// Parameters of the best epoch so far, in store order.
    pub best: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        TrainState {
            report: TrainReport {
                epochs: 0,
                steps: 0,
                best_epoch: 0,
                best_valid_loss: f64::INFINITY,
                stopped_early: false,
                ctc_calls: 0,
                ctc_infeasible: 0,
                history: Vec::new(),
            },
            since_best: 0,
            teacher_forcing: true,
            finished: false,
            optimizer: OptimizerState::new(store),
            best: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BoxSource {
    Truth,
    Matched,
}

/// Network for one setup: parameters plus the branch layouts.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: PipelineConfig,
    pub setup: SetupKind,
    pub alphabet: Alphabet,
    pub tags: TagSet,
    pub store: ParamStore<T>,
    backbone: Backbone,
    head: DetectHead,
    recog: Option<RecogHead>,
    tagger: Option<SeqTagger>,
    classifier: Option<WordClassifier>,
}

struct Forward {
    total: Var,
    parts: LossParts,
    dets: Vec<Detection>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &PipelineConfig, setup: SetupKind) -> Result<Self> {
        config.validate()?;
        let alphabet = config.alphabet()?;
        let tags = config.tag_set()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut store, &mut rng)?;
        let fpn = config.backbone.fpn_channels;
        let classes = if setup == SetupKind::A { tags.len() } else { 1 };
        let head = DetectHead::new(&config.detect, fpn, classes, &mut store, &mut rng)?;
        let recog = if setup.has_recog() {
            Some(RecogHead::new(
                &config.recog,
                fpn,
                alphabet.num_classes(),
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        let tagger = if setup.has_tagger() {
            Some(SeqTagger::new(
                &config.ner.tagger(),
                fpn * config.pool.pool_w,
                tags.len(),
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        let classifier = if setup == SetupKind::Baseline {
            Some(WordClassifier::new(
                &config.ner.classifier,
                tags.len(),
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Model {
            config: config.clone(),
            setup,
            alphabet,
            tags,
            store,
            backbone,
            head,
            recog,
            tagger,
            classifier,
        })
    }

    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Converts a page into network input and encoded targets.
    pub fn prepare(&self, page: &PageSample) -> Result<PreparedPage> {
        let (ink, height, width) = pad_ink(&page.ink(), page.height, page.width);
        let mut p = PreparedPage {
            ink,
            height,
            width,
            boxes: Vec::new(),
            texts: Vec::new(),
            targets: Vec::new(),
            tags: Vec::new(),
        };
        for w in &page.words {
            let (tag, target) = self.encode_word(&w.text, &w.tag)?;
            p.boxes.push(w.bbox);
            p.texts.push(w.text.clone());
            p.targets.push(target);
            p.tags.push(tag);
        }
        Ok(p)
    }

    fn encode_word(&self, text: &str, tag: &str) -> Result<(usize, Vec<usize>)> {
        let t = self.tags.index(tag).ok_or_else(|| {
            Error::Incompatible(format!("tag `{tag}` is not in the model tag set"))
        })?;
        let target = self.alphabet.encode(text).map_err(|_| {
            Error::Incompatible(format!("word `{text}` has characters outside the alphabet"))
        })?;
        Ok((t, target))
    }

    /// Fails with [`Error::Incompatible`] if the page uses a tag or character
    /// the model does not know.
    pub fn check_page(&self, page: &PageSample) -> Result<()> {
        page.words
            .iter()
            .try_for_each(|w| self.encode_word(&w.text, &w.tag).map(|_| ()))
    }

    fn anchors(&self, h: usize, w: usize) -> Result<AnchorSet> {
        self.config.detect.anchors(h, w)
    }

    fn image_var(g: &mut Graph<T>, ink: &[f32], h: usize, w: usize) -> Result<Var> {
        let t = Tensor::new(
            [1, 1, h, w],
            ink.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?;
        Ok(g.constant(t))
    }

    /// Builds the loss graph of one page. `want_dets` also decodes detections.
    fn forward_loss(
        &self,
        g: &mut Graph<T>,
        page: &PreparedPage,
        anchors: &AnchorSet,
        source: BoxSource,
        want_dets: bool,
        ctc: &mut CtcStats,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let x = Self::image_var(g, &page.ink, page.height, page.width)?;
        let feats = self.backbone.extract(g, &self.store, x)?;
        let out = self.head.forward(g, &self.store, &feats)?;
        let classes: Vec<usize> = if self.setup == SetupKind::A {
            page.tags.clone()
        } else {
            vec![0; page.boxes.len()]
        };
        let targets = assign_targets(anchors, &page.boxes, &classes, cfg.detect.assign())?;
        let l_cls = cls_loss_node(g, out.logits, &targets, cfg.detect.focal_gamma)?;
        let l_reg = reg_loss_node(g, out.deltas, &targets)?;
        let dets = if want_dets || source == BoxSource::Matched {
            detect(
                g.value(out.logits).data(),
                g.value(out.deltas).data(),
                self.num_classes(),
                anchors,
                &cfg.detect,
            )?
        } else {
            Vec::new()
        };
        let w = cfg.train.loss_weights;
        let mut terms = vec![(l_cls, T::from_f64(w[0])), (l_reg, T::from_f64(w[1]))];
        let mut parts = LossParts {
            cls: g.value(l_cls).item().to_f64(),
            reg: g.value(l_reg).item().to_f64(),
            ..Default::default()
        };
        if !page.boxes.is_empty()
            && (self.recog.is_some() || self.tagger.is_some() || self.classifier.is_some())
        {
            let boxes = match source {
                BoxSource::Truth => page.boxes.clone(),
                BoxSource::Matched => {
                    substitute_matched(&dets, &page.boxes, page.height, page.width)
                }
            };
            if let Some(clf) = &self.classifier {
                let crops = word_crops(&page.ink, page.height, page.width, &boxes, clf.config())?;
                let c = clf.config();
                let t = Tensor::new(
                    [boxes.len(), 1, c.crop_h, c.crop_w],
                    crops.iter().map(|&v| T::from_f64(v as f64)).collect(),
                )?;
                let xin = g.constant(t);
                let logits = clf.forward(g, &self.store, xin)?;
                let tg: Vec<Option<usize>> = page.tags.iter().map(|&t| Some(t)).collect();
                let l = tag_loss(g, logits, &tg)?;
                parts.ner = g.value(l).item().to_f64();
                terms.push((l, T::from_f64(w[3])));
            } else {
                let pooled = pool(g, feats.p3(), &boxes, &cfg.pool)?;
                if let Some(rec) = &self.recog {
                    let lat = rec.forward(g, &self.store, pooled.var)?;
                    let l = ctc_loss_node(g, lat, &page.targets, ctc)?;
                    parts.ctc = g.value(l).item().to_f64();
                    terms.push((l, T::from_f64(w[2])));
                }
                if let Some(tagger) = &self.tagger {
                    let order = reading_order(&boxes).order;
                    let sl = tagger.forward(g, &self.store, pooled.var, &order)?;
                    let rows = g.shape(sl.logits)[0];
                    let tg: Vec<Option<usize>> = order
                        .iter()
                        .take(rows)
                        .map(|&i| Some(page.tags[i]))
                        .collect();
                    let l = tag_loss(g, sl.logits, &tg)?;
                    parts.ner = g.value(l).item().to_f64();
                    terms.push((l, T::from_f64(w[3])));
                }
            }
        }
        let total = g.weighted_sum(&terms)?;
        parts.total = g.value(total).item().to_f64();
        Ok(Forward { total, parts, dets })
    }

    /// Loss of one page without touching the parameters.
    pub fn page_loss(&self, page: &PreparedPage) -> Result<LossParts> {
        let anchors = self.anchors(page.height, page.width)?;
        let mut g = Graph::new();
        Ok(self
            .forward_loss(
                &mut g,
                page,
                &anchors,
                BoxSource::Truth,
                false,
                &mut CtcStats::default(),
            )?
            .parts)
    }

    /// One optimizer step on one page. Returns the loss before the update; on
    /// a non-finite loss or gradient the parameters are left untouched.
    pub fn train_step(
        &mut self,
        page: &PreparedPage,
        opt: &mut OptimizerState,
        teacher_forcing: bool,
        ctc: &mut CtcStats,
    ) -> Result<LossParts> {
        let anchors = self.anchors(page.height, page.width)?;
        let source = if teacher_forcing {
            BoxSource::Truth
        } else {
            BoxSource::Matched
        };
        let mut g = Graph::new();
        let f = self.forward_loss(&mut g, page, &anchors, source, false, ctc)?;
        if !f.parts.total.is_finite() {
            return Err(diverged(
                0,
                opt.step as usize,
                format!("loss is {}", f.parts.total),
            ));
        }
        let grads = g.backward(f.total)?;
        self.store.zero_grads();
        g.accumulate_param_grads(&grads, &mut self.store);
        drop(g);
        self.store.fill_missing_grads("");
        let norm = self.store.grad_norm();
        if !norm.is_finite() {
            self.store.zero_grads();
            return Err(diverged(
                0,
                opt.step as usize,
                format!("gradient norm is {norm}"),
            ));
        }
        if let Some(clip) = self.config.train.grad_clip {
            if norm > clip {
                let c = T::from_f64(clip / norm);
                for p in self.store.iter_mut() {
                    if let Some(gr) = p.grad.as_mut() {
                        gr.iter_mut().for_each(|v| *v *= c);
                    }
                }
            }
        }
        opt.step(&self.config.train.optimizer, &mut self.store, 1.0)?;
        Ok(f.parts)
    }

    /// Trains on `train`, selecting the parameters with the lowest validation
    /// loss. `log` sees every finished epoch.
    ///
    /// On divergence the parameters of the last finite step are kept and
    /// [`Error::Diverged`] is returned.
    pub fn train(
        &mut self,
        train: &[PageSample],
        valid: &[PageSample],
        log: &mut dyn FnMut(&EpochLog),
    ) -> Result<TrainReport> {
        Ok(self.train_session(None, None, train, valid, log)?.report)
    }

    /// Like [`Model::train`], but resumable: starts from `state` if given and
    /// returns after at most `max_epochs` further epochs. Continuing a paused
    /// state gives the same parameters as an uninterrupted run.
    pub fn train_session(
        &mut self,
        state: Option<TrainState<T>>,
        max_epochs: Option<usize>,
        train: &[PageSample],
        valid: &[PageSample],
        log: &mut dyn FnMut(&EpochLog),
    ) -> Result<TrainState<T>> {
        if train.is_empty() {
            bail!(InvalidArgument, "no training pages");
        }
        let tc = self.config.train.clone();
        let prep_t: Vec<PreparedPage> = train
            .iter()
            .map(|p| self.prepare(p))
            .collect::<Result<_>>()?;
        let prep_v: Vec<PreparedPage> = if valid.is_empty() {
            prep_t.clone()
        } else {
            valid
                .iter()
                .map(|p| self.prepare(p))
                .collect::<Result<_>>()?
        };
        let mut st = match state {
            Some(s) => {
                if s.optimizer.first.len() != self.store.len() {
                    bail!(Incompatible, "training state does not belong to this model");
                }
                s
            }
            None => TrainState::new(&self.store),
        };
        if st.finished {
            return Ok(st);
        }
        let mut ctc = CtcStats {
            evaluated: st.report.ctc_calls,
            infeasible: st.report.ctc_infeasible,
        };
        let first = st.report.epochs + 1;
        let last = max_epochs.map_or(tc.epochs, |m| tc.epochs.min(st.report.epochs + m));
        let mut done = first > tc.epochs;
        for epoch in first..=last {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e ^ ((epoch as u64) << 40));
            let mut order: Vec<usize> = (0..prep_t.len()).collect();
            order.shuffle(&mut rng);
            let mut acc = LossParts::default();
            let mut n = 0;
            for &i in &order {
                if tc.max_steps.is_some_and(|m| st.report.steps >= m) {
                    break;
                }
                let shifted;
                let page = if tc.shift_augment > 0 {
                    let s = tc.shift_augment as i64;
                    shifted = shift_page(
                        &prep_t[i],
                        rng.random_range(-s..=s),
                        rng.random_range(-s..=s),
                    );
                    shifted.as_ref().unwrap_or(&prep_t[i])
                } else {
                    &prep_t[i]
                };
                let parts =
                    match self.train_step(page, &mut st.optimizer, st.teacher_forcing, &mut ctc) {
                        Ok(p) => p,
                        Err(Error::Diverged { reason, .. }) => {
                            return Err(diverged(epoch, st.report.steps, reason));
                        }
                        Err(e) => return Err(e),
                    };
                acc.add(&parts);
                n += 1;
                st.report.steps += 1;
            }
            if n == 0 {
                done = true;
                break;
            }
            let (valid_loss, valid_ap) = self.validate(&prep_v)?;
            if !valid_loss.is_finite() {
                return Err(diverged(
                    epoch,
                    st.report.steps,
                    format!("validation loss is {valid_loss}"),
                ));
            }
            let entry = EpochLog {
                epoch,
                steps: st.report.steps,
                train: acc.scaled(1.0 / n as f64),
                valid_loss,
                valid_ap,
                teacher_forcing: st.teacher_forcing,
            };
            log(&entry);
            st.report.history.push(entry);
            st.report.epochs = epoch;
            st.report.ctc_calls = ctc.evaluated;
            st.report.ctc_infeasible = ctc.infeasible;
            if valid_ap > tc.teacher_forcing_ap {
                st.teacher_forcing = false;
            }
            if valid_loss < st.report.best_valid_loss {
                st.report.best_valid_loss = valid_loss;
                st.report.best_epoch = epoch;
                st.best = Some(self.store.iter().map(|p| p.value.clone()).collect());
                st.since_best = 0;
            } else {
                st.since_best += 1;
                if st.since_best >= tc.patience {
                    st.report.stopped_early = true;
                    done = true;
                    break;
                }
            }
            if epoch == tc.epochs || tc.max_steps.is_some_and(|m| st.report.steps >= m) {
                done = true;
                break;
            }
        }
        st.report.ctc_calls = ctc.evaluated;
        st.report.ctc_infeasible = ctc.infeasible;
        if done {
            st.finished = true;
            if let Some(vals) = &st.best {
                for (p, v) in self.store.iter_mut().zip(vals) {
                    p.value = v.clone();
                }
            }
        }
        Ok(st)
    }

    /// Mean validation loss (ground-truth boxes) and detection AP.
    fn validate(&self, pages: &[PreparedPage]) -> Result<(f64, f64)> {
        let mut total = 0.0;
        let mut records = Vec::new();
        let mut num_gt = 0;
        for p in pages {
            let anchors = self.anchors(p.height, p.width)?;
            let mut g = Graph::new();
            let f = self.forward_loss(
                &mut g,
                p,
                &anchors,
                BoxSource::Truth,
                true,
                &mut CtcStats::default(),
            )?;
            total += f.parts.total;
            let boxes: Vec<BBox> = f.dets.iter().map(|d| d.bbox).collect();
            let m = match_detections(&boxes, &p.boxes, 0.5);
            records.extend(
                f.dets
                    .iter()
                    .zip(&m.matches)
                    .map(|(d, mm)| (d.score, mm.is_some())),
            );
            num_gt += p.boxes.len();
        }
        let ap = if num_gt > 0 {
            average_precision(&records, num_gt)?
        } else {
            0.0
        };
        Ok((total / pages.len().max(1) as f64, ap))
    }

    /// Reads a page: detections, transcriptions and tags in reading order.
    pub fn predict_ink(&self, ink: &[f32], h: usize, w: usize) -> Result<Vec<WordPrediction>> {
        if ink.len() != h * w {
            bail!(
                Shape,
                "image buffer of {} values does not match {h}x{w}",
                ink.len()
            );
        }
        let (pad, ph, pw) = pad_ink(ink, h, w);
        let anchors = self.anchors(ph, pw)?;
        let mut g = Graph::new();
        let x = Self::image_var(&mut g, &pad, ph, pw)?;
        let feats = self.backbone.extract(&mut g, &self.store, x)?;
        let out = self.head.forward(&mut g, &self.store, &feats)?;
        let dets = detect(
            g.value(out.logits).data(),
            g.value(out.deltas).data(),
            self.num_classes(),
            &anchors,
            &self.config.detect,
        )?;
        let boxes: Vec<BBox> = dets.iter().map(|d| clip_box(&d.bbox, h, w)).collect();
        let keep: Vec<usize> = (0..boxes.len())
            .filter(|&i| boxes[i].w >= 1.0 && boxes[i].h >= 1.0)
            .collect();
        let dets: Vec<Detection> = keep.iter().map(|&i| dets[i].clone()).collect();
        let boxes: Vec<BBox> = keep.iter().map(|&i| boxes[i]).collect();
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let order = reading_order(&boxes).order;
        let mut texts: Vec<Option<String>> = vec![None; boxes.len()];
        let mut tags: Vec<Option<usize>> = vec![None; boxes.len()];
        if self.setup == SetupKind::A {
            for (t, d) in tags.iter_mut().zip(&dets) {
                *t = Some(d.class);
            }
        }
        if let Some(clf) = &self.classifier {
            let crops = word_crops(&pad, ph, pw, &boxes, clf.config())?;
            let c = clf.config();
            let t = Tensor::new(
                [boxes.len(), 1, c.crop_h, c.crop_w],
                crops.iter().map(|&v| T::from_f64(v as f64)).collect(),
            )?;
            let xin = g.constant(t);
            let logits = clf.forward(&mut g, &self.store, xin)?;
            for (t, a) in tags
                .iter_mut()
                .zip(argmax_rows(g.value(logits).data(), self.tags.len()))
            {
                *t = Some(a);
            }
        }
        if self.recog.is_some() || self.tagger.is_some() {
            let pooled = pool(&mut g, feats.p3(), &boxes, &self.config.pool)?;
            if let Some(rec) = &self.recog {
                let lat = rec.forward(&mut g, &self.store, pooled.var)?;
                let k = rec.num_classes();
                let v = g.value(lat).data();
                let per = v.len() / boxes.len();
                for (i, t) in texts.iter_mut().enumerate() {
                    *t = Some(
                        self.alphabet
                            .decode(&greedy_decode(&v[i * per..(i + 1) * per], k)),
                    );
                }
            }
            if let Some(tagger) = &self.tagger {
                let sl = tagger.forward(&mut g, &self.store, pooled.var, &order)?;
                let pred = argmax_rows(g.value(sl.logits).data(), self.tags.len());
                for (pos, &bi) in order.iter().enumerate() {
                    // words past the tagger's window are left untagged as `other`
                    tags[bi] = Some(pred.get(pos).copied().unwrap_or(self.tags.other()));
                }
            }
        }
        Ok(order
            .iter()
            .map(|&i| WordPrediction {
                bbox: boxes[i].to_array(),
                score: dets[i].score,
                text: texts[i].clone(),
                tag: tags[i].map(|t| self.tags.name(t).to_string()),
            })
            .collect())
    }

    pub fn predict(&self, page: &PageSample) -> Result<Vec<WordPrediction>> {
        self.predict_ink(&page.ink(), page.height, page.width)
    }

    /// Metrics of one page against its annotations.
    pub fn evaluate_page(&self, page: &PageSample) -> Result<PageEval> {
        self.check_page(page)?;
        let preds = self.predict(page)?;
        Ok(score_page(&preds, page, &self.tags, self.setup))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            setup: self.setup,
            config: self.config.clone(),
            alphabet: self.alphabet.clone(),
            tags: self.tags.clone(),
            params: self
                .store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.dims().to_vec(),
                    data: p.value.data().iter().map(|v| v.to_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model; names, shapes, alphabet and tag set must agree with
    /// the architecture described by the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            bail!(
                Checkpoint,
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            );
        }
        let mut m = Model::new(&ck.config, ck.setup)?;
        if m.alphabet != ck.alphabet || m.tags != ck.tags {
            bail!(
                Checkpoint,
                "alphabet or tag set disagrees with the stored config"
            );
        }
        if m.store.len() != ck.params.len() {
            bail!(
                Checkpoint,
                "expected {} parameters, found {}",
                m.store.len(),
                ck.params.len()
            );
        }
        for (p, s) in m.store.iter_mut().zip(&ck.params) {
            if p.name != s.name
                || p.value.dims() != s.shape.as_slice()
                || s.data.len() != p.value.len()
            {
                bail!(
                    Checkpoint,
                    "parameter `{}` {:?} does not match stored `{}` {:?}",
                    p.name,
                    p.value.dims(),
                    s.name,
                    s.shape
                );
            }
            for (d, &v) in p.value.data_mut().iter_mut().zip(&s.data) {
                *d = T::from_f64(v as f64);
            }
        }
        Ok(m)
    }
}

/// Translates a prepared page by `(dx, dy)` pixels inside its canvas;
/// `None` if a word box would leave it.
pub fn shift_page(p: &PreparedPage, dx: i64, dy: i64) -> Option<PreparedPage> {
    let (h, w) = (p.height as i64, p.width as i64);
    let boxes: Vec<BBox> = p
        .boxes
        .iter()
        .map(|b| BBox::new(b.x + dx as f64, b.y + dy as f64, b.w, b.h))
        .collect();
    let inside = boxes.iter().all(|b| {
        let (x0, y0, x1, y1) = b.corners();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= w as f64 && y1 <= h as f64
    });
    if !inside {
        return None;
    }
    let mut ink = vec![0.0f32; p.ink.len()];
    for y in 0..h {
        let sy = y - dy;
        if !(0..h).contains(&sy) {
            continue;
        }
        for x in 0..w {
            let sx = x - dx;
            if (0..w).contains(&sx) {
                ink[(y * w + x) as usize] = p.ink[(sy * w + sx) as usize];
            }
        }
    }
    Some(PreparedPage {
        ink,
        boxes,
        ..p.clone()
    })
}

fn diverged(epoch: usize, step: usize, reason: String) -> Error {
    Error::Diverged {
        epoch,
        step,
        reason,
    }
}

fn clip_box(b: &BBox, h: usize, w: usize) -> BBox {
    let (x0, y0, x1, y1) = b.corners();
    BBox::from_corners(
        x0.clamp(0.0, w as f64),
        y0.clamp(0.0, h as f64),
        x1.clamp(0.0, w as f64),
        y1.clamp(0.0, h as f64),
    )
}

/// For every ground-truth box, the best detection overlapping it by at least
/// 0.5 (clipped to the image), or the ground-truth box itself.
fn substitute_matched(dets: &[Detection], gts: &[BBox], h: usize, w: usize) -> Vec<BBox> {
    let boxes: Vec<BBox> = dets.iter().map(|d| clip_box(&d.bbox, h, w)).collect();
    let m = match_detections(&boxes, gts, 0.5);
    let mut out = gts.to_vec();
    for (b, mm) in boxes.iter().zip(&m.matches) {
        if let Some(gi) = *mm {
            if b.w >= 1.0 && b.h >= 1.0 && iou(b, &gts[gi]) >= 0.5 {
                out[gi] = *b;
            }
        }
    }
    out
}

/// Per-page evaluation counts; merge pages in a fixed order for
/// reproducible totals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PageEval {
    pub detection: MetricCounts,
    /// `(score, matched)` for every detection.
    pub ap_records: Vec<(f64, bool)>,
    pub num_gt: usize,
    pub entity: MetricCounts,
    pub cer: CerAccumulator,
}

impl PageEval {
    pub fn merge(&mut self, o: &PageEval) {
        self.detection.merge(&o.detection);
        self.ap_records.extend_from_slice(&o.ap_records);
        self.num_gt += o.num_gt;
        self.entity.merge(&o.entity);
        self.cer.merge(&o.cer);
    }

    pub fn ap(&self) -> Result<f64> {
        average_precision(&self.ap_records, self.num_gt)
    }

    pub fn f1(&self) -> f64 {
        f1(&self.entity)
    }
}

/// Scores predictions against a page. Unmatched ground-truth words count
/// as fully deleted for CER.
pub fn score_page(
    preds: &[WordPrediction],
    page: &PageSample,
    tags: &TagSet,
    setup: SetupKind,
) -> PageEval {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let boxes: Vec<BBox> = idx.iter().map(|&i| bbox_of(&preds[i])).collect();
    let gts: Vec<BBox> = page.words.iter().map(|w| w.bbox).collect();
    let mut det = match_detections(&boxes, &gts, 0.5);
    let ap_records = idx
        .iter()
        .zip(&det.matches)
        .map(|(&i, m)| (preds[i].score, m.is_some()))
        .collect();
    let mut cer = CerAccumulator::default();
    if setup.has_recog() {
        let mut hyp: Vec<&str> = vec![""; gts.len()];
        for (&i, m) in idx.iter().zip(&det.matches) {
            if let Some(gi) = *m {
                hyp[gi] = preds[i].text.as_deref().unwrap_or("");
            }
        }
        for (h, w) in hyp.iter().zip(&page.words) {
            cer.add(h, &w.text);
        }
    }
    let mut entity = MetricCounts::default();
    if setup.tags_entities() {
        let other = tags.other();
        let d: Vec<(BBox, usize)> = idx
            .iter()
            .map(|&i| {
                (
                    bbox_of(&preds[i]),
                    preds[i]
                        .tag
                        .as_deref()
                        .and_then(|t| tags.index(t))
                        .unwrap_or(other),
                )
            })
            .collect();
        let g: Vec<(BBox, usize)> = page
            .words
            .iter()
            .map(|w| (w.bbox, tags.index(&w.tag).unwrap_or(other)))
            .collect();
        entity = match_entities(&d, &g, other, 0.5);
        entity.matches.clear();
    }
    det.matches.clear();
    PageEval {
        detection: det,
        ap_records,
        num_gt: gts.len(),
        entity,
        cer,
    }
}

fn bbox_of(p: &WordPrediction) -> BBox {
    BBox::new(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3])
}

/// Aggregated metrics of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cer: Option<f64>,
    pub counts: BTreeMap<String, usize>,
}

pub fn summarize(total: &PageEval, setup: SetupKind, pages: usize) -> Result<EvalSummary> {
    let mut counts = BTreeMap::new();
    counts.insert("pages".to_string(), pages);
    counts.insert("gt_words".to_string(), total.num_gt);
    counts.insert("det_tp".to_string(), total.detection.tp);
    counts.insert("det_fp".to_string(), total.detection.fp);
    counts.insert("det_fn".to_string(), total.detection.fn_);
    if setup.tags_entities() {
        counts.insert("ent_tp".to_string(), total.entity.tp);
        counts.insert("ent_fp".to_string(), total.entity.fp);
        counts.insert("ent_fn".to_string(), total.entity.fn_);
    }
    if setup.has_recog() {
        counts.insert("cer_edits".to_string(), total.cer.edits);
        counts.insert("cer_chars".to_string(), total.cer.ref_chars);
    }
    Ok(EvalSummary {
        ap: if total.num_gt > 0 { total.ap()? } else { 0.0 },
        f1: setup.tags_entities().then(|| total.f1()),
        cer: if setup.has_recog() {
            total.cer.value()
        } else {
            None
        },
        counts,
    })
}

/// Serializable parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub setup: SetupKind,
    pub config: PipelineConfig,
    pub alphabet: Alphabet,
    pub tags: TagSet,
    pub params: Vec<NamedTensor>,
}
