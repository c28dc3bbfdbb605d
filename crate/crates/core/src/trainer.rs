//! Teacher–student training loop.
//!
//! Each iteration follows a fixed order: the teacher predicts pseudo-labels
//! on weak views of unlabelled crops (optionally rectifying them with its
//! prototype relationship map), the student takes one SGD step on the main
//! loss (supervised + map-supervised + confidence-gated unsupervised +
//! contrastive), the rectification gate takes its own SGD step with all
//! other parameters frozen, and finally the teacher tracks the student by
//! exponential moving average. The teacher is never touched by the
//! optimizer; rectification-gate and projection-head parameters are shared
//! with the teacher by copy instead of averaging, so both networks always
//! rectify with the same gate.
//!
//! Reproducibility: every random decision of iteration `k` is drawn from
//! `iter_rng(seed, k)` in a fixed documented order (case indices, crop
//! geometry, intensity parameters, box mixing, contrastive sampling), so a
//! run is a pure function of config + seed + dataset.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    align_teacher_prediction, apply_strong_intensity, extract_weak, extract_weak_mask,
    paste_box, sample_geom, sample_mix_box, sample_strong_params, AugConfig, GeomView, MixBox,
    StrongParams,
};
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::cps::{
    anchor_indices_labelled, anchor_indices_unlabelled, negative_indices_labelled,
    negative_indices_unlabelled, positive_centre, sample_without_replacement,
    support_indices_unlabelled, Cps, CpsConfig, MeanAccumulator,
};
use crate::crln::{Crln, RectifyVariant, StageSchedule};
use crate::dim::{Dim, DimConfig};
use crate::err::{CoreError, CoreResult};
use crate::metrics::{argmax_classes, dice_binary};
use crate::params::{ParamId, ParamStore};
use crate::rng::{init_rng, iter_rng};
use crate::sgd::{poly_lr, Sgd, SgdConfig};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{DatasetSplit, LabelMask, Volume};

/// Full training configuration. Defaults follow the reference recipe:
/// SGD momentum 0.9, weight decay 5e-4, initial learning rate 2.5e-3 with
/// polynomial decay, batches of 2 labelled + 2 unlabelled crops,
/// rectification starting at iteration 800, 16 prototypes per class,
/// temperature 0.5 and blend weight 0.6 for the contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub num_classes: usize,
    /// Backbone width parameter (must be even; bottleneck is twice this).
    pub base_channels: usize,
    pub max_iters: usize,
    pub labelled_per_batch: usize,
    pub unlabelled_per_batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub ema_decay: f64,
    /// Iteration after which teacher pseudo-labels are rectified.
    pub rectify_after: u64,
    pub rectify_variant: RectifyVariant,
    pub prototypes_per_class: usize,
    pub learned_aggregation: bool,
    pub tau: f64,
    pub tau_w: f64,
    pub temperature: f64,
    pub xi: f64,
    pub stochastic_xi: bool,
    pub max_anchors: usize,
    pub max_negatives: usize,
    /// Ablations: rectification + relationship map, contrastive term,
    /// intensity/box strong augmentation.
    pub use_crln: bool,
    pub use_cps: bool,
    pub use_strong_aug: bool,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            num_classes: 2,
            base_channels: 8,
            max_iters: 2000,
            labelled_per_batch: 2,
            unlabelled_per_batch: 2,
            lr0: 2.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            ema_decay: 0.99,
            rectify_after: 800,
            rectify_variant: RectifyVariant::Additive,
            prototypes_per_class: 16,
            learned_aggregation: true,
            tau: 0.9,
            tau_w: 0.7,
            temperature: 0.5,
            xi: 0.6,
            stochastic_xi: false,
            max_anchors: 256,
            max_negatives: 512,
            use_crln: true,
            use_cps: true,
            use_strong_aug: true,
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.max_iters == 0 {
            return Err(CoreError::Config("max_iters must be positive".into()));
        }
        if self.labelled_per_batch == 0 || self.unlabelled_per_batch == 0 {
            return Err(CoreError::Config("batch composition must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.poly_power > 0.0) {
            return Err(CoreError::Config("lr0 and poly_power must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(CoreError::Config("momentum/weight_decay out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(CoreError::Config(format!("ema_decay {}", self.ema_decay)));
        }
        self.backbone_config().validate()?;
        self.dim_config().validate()?;
        self.cps_config().validate()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            num_classes: self.num_classes,
            base: self.base_channels,
        }
    }

    pub fn dim_config(&self) -> DimConfig {
        DimConfig {
            num_classes: self.num_classes,
            prototypes_per_class: self.prototypes_per_class,
            feat_bottleneck: self.backbone_config().bottleneck_channels(),
            feat_mid: self.base_channels,
            learned_aggregation: self.learned_aggregation,
        }
    }

    pub fn cps_config(&self) -> CpsConfig {
        let bb = self.backbone_config();
        CpsConfig {
            num_classes: self.num_classes,
            feat_in: bb.out_channels(),
            feat_proj: bb.out_channels(),
            proto_dim: bb.bottleneck_channels(),
            tau: self.tau,
            tau_w: self.tau_w,
            temperature: self.temperature,
            xi: self.xi,
            stochastic_xi: self.stochastic_xi,
            max_anchors: self.max_anchors,
            max_negatives: self.max_negatives,
        }
    }
}

/// One network: segmentation backbone, prototype interaction module,
/// rectification gate, and contrastive projection head over a single
/// parameter store.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub dim: Dim,
    pub crln: Crln,
    pub cps: Cps,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> CoreResult<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, rng, "bb", cfg.backbone_config())?;
        let dim = Dim::new(&mut store, rng, "dim", cfg.dim_config())?;
        let crln = Crln::new(&mut store, rng, "crln", cfg.num_classes, cfg.rectify_variant)?;
        let cps = Cps::new(&mut store, rng, "cps", cfg.cps_config())?;
        Ok(Model { store, backbone, dim, crln, cps })
    }
}

/// Parameters whose values are shared by copy between student and teacher
/// instead of being averaged: the rectification gate (both networks must
/// rectify identically) and the contrastive head (unused by the teacher).
pub fn shared_by_copy(name: &str) -> bool {
    name.starts_with("crln.") || name.starts_with("cps.")
}

/// Exponential moving average of the student into the teacher:
/// `theta_t <- alpha * theta_t + (1 - alpha) * theta_s` elementwise, with
/// `shared` parameters copied verbatim.
pub fn ema_update<T: Scalar>(
    teacher: &mut ParamStore<T>,
    student: &ParamStore<T>,
    alpha: f64,
    shared: impl Fn(&str) -> bool,
) {
    assert_eq!(teacher.names(), student.names(), "parameter layouts differ");
    let a = T::from_f64c(alpha);
    let b = T::one() - a;
    for i in 0..student.len() {
        let id = ParamId(i);
        if shared(student.name(id)) {
            teacher.value_mut(id).data_mut().copy_from_slice(student.value(id).data());
        } else {
            let sv = student.value(id).data();
            let tv = teacher.value_mut(id).data_mut();
            for (t, &s) in tv.iter_mut().zip(sv) {
                *t = a * *t + b * s;
            }
        }
    }
}

/// Supervised segmentation loss: equal-weight soft Dice + cross-entropy.
pub fn supervised_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, target_onehot: Var) -> Var {
    tape.dice_ce(probs, target_onehot, T::one())
}

/// Confidence-gated pseudo-label loss: mean over the full lattice of the
/// negative log-likelihood at the target's argmax, counting only voxels
/// whose maximum target probability reaches `tau`.
pub fn unsupervised_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    tau: f64,
) -> Var {
    let s = target.shape();
    assert_eq!(tape.value(probs).shape(), s, "prediction/target shapes");
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let t = T::from_f64c(tau);
    let d = target.data();
    let mut classes = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = d[i];
        let mut arg = 0usize;
        for ch in 1..c {
            let v = d[ch * n + i];
            if v > best {
                best = v;
                arg = ch;
            }
        }
        classes.push(arg);
        mask.push(best >= t);
    }
    tape.masked_nll(probs, &classes, &mask)
}

/// Per-step statistics for the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_map_supervised: f64,
    pub loss_unsupervised: f64,
    pub loss_contrastive: f64,
    pub mu: f64,
    pub rectification_active: bool,
    /// Fraction of unlabelled-crop voxels whose max teacher probability
    /// reaches tau, before and after rectification.
    pub reliable_before: f64,
    pub reliable_after: f64,
    /// Mean foreground Dice of the teacher's hard pseudo-labels against
    /// synthetic ground truth (when available), before/after rectification.
    pub pseudo_dice_before: Option<f64>,
    pub pseudo_dice_after: Option<f64>,
    pub anchor_count: usize,
}

/// Rectification quality of one full volume under a given model.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifyQuality {
    pub reliable_before: f64,
    pub reliable_after: f64,
    pub dice_before: f64,
    pub dice_after: f64,
}

struct TeacherOutput<T: Scalar> {
    base: Tensor<T>,
    rectified: Tensor<T>,
}

struct LabelledCrop<T: Scalar> {
    x: Tensor<T>,
    classes: Vec<u8>,
    onehot: Tensor<T>,
}

/// Owns all mutable training state: the two models, optimizer velocity,
/// the per-class fallback means for the contrastive centres, and the
/// iteration counter.
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    schedule: StageSchedule,
    student: Model<T>,
    teacher: Model<T>,
    opt: Sgd<T>,
    r_m: Vec<Option<Vec<f64>>>,
    iteration: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> CoreResult<Self> {
        cfg.validate()?;
        let mut rng = init_rng(cfg.seed);
        let student = Model::new(&cfg, &mut rng)?;
        let teacher = student.clone();
        let opt = Sgd::new(
            &student.store,
            SgdConfig { momentum: cfg.momentum, weight_decay: cfg.weight_decay },
        );
        let classes = cfg.num_classes;
        Ok(Trainer {
            schedule: StageSchedule::new(cfg.rectify_after),
            cfg,
            student,
            teacher,
            opt,
            r_m: alloc::vec![None; classes],
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn student(&self) -> &Model<T> {
        &self.student
    }

    pub fn teacher(&self) -> &Model<T> {
        &self.teacher
    }

    pub fn optimizer(&self) -> &Sgd<T> {
        &self.opt
    }

    pub fn centre_fallbacks(&self) -> &[Option<Vec<f64>>] {
        &self.r_m
    }

    /// Restores a snapshot (checkpoint resume). Layouts must match.
    pub fn restore(
        &mut self,
        student: &ParamStore<T>,
        teacher: &ParamStore<T>,
        velocity: Vec<Tensor<T>>,
        centre_fallbacks: Vec<Option<Vec<f64>>>,
        iteration: u64,
    ) {
        self.student.store.copy_from(student);
        self.teacher.store.copy_from(teacher);
        self.opt.load_state(velocity);
        assert_eq!(centre_fallbacks.len(), self.r_m.len(), "class count");
        self.r_m = centre_fallbacks;
        self.iteration = iteration;
    }

    /// Runs one full training iteration.
    pub fn train_step(
        &mut self,
        split: &DatasetSplit,
        truth: Option<&[LabelMask]>,
    ) -> CoreResult<StepStats> {
        self.step_inner(split, truth, false)
    }

    fn step_inner(
        &mut self,
        split: &DatasetSplit,
        truth: Option<&[LabelMask]>,
        zero_losses: bool,
    ) -> CoreResult<StepStats> {
        let cfg = self.cfg.clone();
        let iteration = self.iteration + 1;
        if iteration as usize > cfg.max_iters {
            return Err(CoreError::Config(format!(
                "iteration {iteration} exceeds max_iters {}",
                cfg.max_iters
            )));
        }
        if split.labelled.is_empty() || split.unlabelled.is_empty() {
            return Err(CoreError::Data("need labelled and unlabelled cases".into()));
        }
        if let Some(t) = truth {
            if t.len() != split.unlabelled.len() {
                return Err(CoreError::Data("truth count != unlabelled count".into()));
            }
        }
        let lr = poly_lr(cfg.lr0, (iteration - 1) as usize, cfg.max_iters, cfg.poly_power);
        let mut rng = iter_rng(cfg.seed, self.iteration);
        let crop = cfg.aug.crop;
        let cn = crop[0] * crop[1] * crop[2];
        let c = cfg.num_classes;
        let l_pb = cfg.labelled_per_batch;
        let u_pb = cfg.unlabelled_per_batch;

        // ---- fixed draw order: cases, geometry, intensity, mixing ----
        let l_idx: Vec<usize> =
            (0..l_pb).map(|_| rng.gen_range(0..split.labelled.len())).collect();
        let u_idx: Vec<usize> =
            (0..u_pb).map(|_| rng.gen_range(0..split.unlabelled.len())).collect();
        let l_geom: Vec<GeomView> = l_idx
            .iter()
            .map(|&i| sample_geom(&mut rng, split.labelled[i].volume.dims(), &cfg.aug))
            .collect();
        let u_geom: Vec<GeomView> = u_idx
            .iter()
            .map(|&i| sample_geom(&mut rng, split.unlabelled[i].dims(), &cfg.aug))
            .collect();
        let strong: Vec<Option<StrongParams>> = if cfg.use_strong_aug {
            (0..u_pb).map(|_| Some(sample_strong_params(&mut rng, &cfg.aug))).collect()
        } else {
            alloc::vec![None; u_pb]
        };
        let mix: Vec<Option<MixBox>> = if cfg.use_strong_aug && u_pb > 1 {
            (0..u_pb)
                .map(|k| {
                    let donor = (k + 1) % u_pb;
                    if rng.gen_bool(cfg.aug.cutmix_prob) {
                        Some(sample_mix_box(&mut rng, &cfg.aug, donor))
                    } else {
                        None
                    }
                })
                .collect()
        } else {
            alloc::vec![None; u_pb]
        };

        // ---- materialize crops ----
        let labelled: Vec<LabelledCrop<T>> = l_idx
            .iter()
            .zip(&l_geom)
            .map(|(&i, geom)| {
                let case = &split.labelled[i];
                let vol = case.volume.normalized();
                let data = extract_weak(vol.data(), vol.dims(), geom, crop);
                let classes = extract_weak_mask(case.mask.classes(), vol.dims(), geom, crop);
                LabelledCrop {
                    x: crop_tensor::<T>(&data, crop),
                    onehot: onehot_tensor::<T>(&classes, c, crop),
                    classes,
                }
            })
            .collect();
        let u_weak: Vec<Vec<f32>> = u_idx
            .iter()
            .zip(&u_geom)
            .map(|(&i, geom)| {
                let vol = split.unlabelled[i].normalized();
                extract_weak(vol.data(), vol.dims(), geom, crop)
            })
            .collect();
        let u_strong_base: Vec<Vec<f32>> = u_weak
            .iter()
            .zip(&strong)
            .map(|(weak, sp)| match sp {
                Some(p) => apply_strong_intensity(weak, p, cfg.aug.noise_sigma),
                None => weak.clone(),
            })
            .collect();
        let u_student_in: Vec<Tensor<T>> = (0..u_pb)
            .map(|k| {
                let mut data = u_strong_base[k].clone();
                if let Some(m) = &mix[k] {
                    paste_box(&mut data, &u_strong_base[m.donor], crop, m);
                }
                crop_tensor::<T>(&data, crop)
            })
            .collect();

        // ---- teacher pass: pseudo-labels on weak views, no gradients ----
        let rect_active = cfg.use_crln && self.schedule.active(iteration);
        let teacher_out: Vec<TeacherOutput<T>> = u_weak
            .iter()
            .map(|weak| {
                let mut tt: Tape<T> = Tape::new();
                let tvars = self.teacher.store.register_frozen(&mut tt);
                let x = tt.constant(crop_tensor::<T>(weak, crop));
                let pyr = self.teacher.backbone.forward(&mut tt, &tvars, x);
                let probs = self.teacher.backbone.probabilities(&mut tt, &pyr);
                let base = tt.value(probs).clone();
                let rectified = if rect_active {
                    let map = self.teacher.dim.relationship_map(&mut tt, &tvars, pyr.f2, pyr.f3);
                    let map_probs = tt.softmax_axis0(map);
                    let map_t = tt.value(map_probs).clone();
                    self.teacher.crln.rectify_tensor(&self.teacher.store, &base, &map_t, cfg.tau)?
                } else {
                    base.clone()
                };
                Ok(TeacherOutput { base, rectified })
            })
            .collect::<CoreResult<_>>()?;

        // Pseudo-label quality on this batch (per-crop, before box mixing).
        let reliable_before = mean_reliable(&teacher_out, cfg.tau, |o| &o.base);
        let reliable_after = mean_reliable(&teacher_out, cfg.tau, |o| &o.rectified);
        let (pseudo_dice_before, pseudo_dice_after) = match truth {
            Some(masks) => {
                let crops: Vec<Vec<u8>> = u_idx
                    .iter()
                    .zip(&u_geom)
                    .map(|(&i, geom)| {
                        extract_weak_mask(masks[i].classes(), masks[i].dims(), geom, crop)
                    })
                    .collect();
                (
                    Some(mean_pseudo_dice(&teacher_out, &crops, c, |o| &o.base)),
                    Some(mean_pseudo_dice(&teacher_out, &crops, c, |o| &o.rectified)),
                )
            }
            None => (None, None),
        };

        // Align pseudo-labels to the student's mixed views.
        let targets: Vec<Tensor<T>> = (0..u_pb)
            .map(|k| {
                let donor = mix[k]
                    .as_ref()
                    .map(|m| (&teacher_out[m.donor].rectified, m));
                align_teacher_prediction(&teacher_out[k].rectified, donor)
            })
            .collect();

        // ---- student pass: one tape for the whole main loss ----
        let mut tape: Tape<T> = Tape::new();
        let vars = self.student.store.register(&mut tape);
        let mut sup_terms = Vec::with_capacity(l_pb);
        let mut map_terms = Vec::with_capacity(l_pb);
        let mut rows_vars: Vec<Var> = Vec::with_capacity(l_pb + u_pb);
        let mut probs_l_snap: Vec<Tensor<T>> = Vec::with_capacity(l_pb);
        let mut map_l_snap: Vec<Tensor<T>> = Vec::with_capacity(l_pb);
        let mut onehot_vars: Vec<Var> = Vec::with_capacity(l_pb);
        for lc in &labelled {
            let x = tape.constant(lc.x.clone());
            let pyr = self.student.backbone.forward(&mut tape, &vars, x);
            let probs = self.student.backbone.probabilities(&mut tape, &pyr);
            let target = tape.constant(lc.onehot.clone());
            onehot_vars.push(target);
            sup_terms.push(supervised_loss(&mut tape, probs, target));
            probs_l_snap.push(tape.value(probs).clone());
            if cfg.use_crln {
                let map = self.student.dim.relationship_map(&mut tape, &vars, pyr.f2, pyr.f3);
                let map_probs = tape.softmax_axis0(map);
                map_l_snap.push(tape.value(map_probs).clone());
                map_terms.push(supervised_loss(&mut tape, map_probs, target));
            }
            if cfg.use_cps {
                let field = self.student.cps.project_field(&mut tape, &vars, pyr.f4);
                rows_vars.push(tape.transpose(field));
            }
        }
        let mut unsup_terms = Vec::with_capacity(u_pb);
        let mut probs_u_snap: Vec<Tensor<T>> = Vec::with_capacity(u_pb);
        for (k, xin) in u_student_in.iter().enumerate() {
            let x = tape.constant(xin.clone());
            let pyr = self.student.backbone.forward(&mut tape, &vars, x);
            let probs = self.student.backbone.probabilities(&mut tape, &pyr);
            unsup_terms.push(unsupervised_loss(&mut tape, probs, &targets[k], cfg.tau));
            probs_u_snap.push(tape.value(probs).clone());
            if cfg.use_cps {
                let field = self.student.cps.project_field(&mut tape, &vars, pyr.f4);
                rows_vars.push(tape.transpose(field));
            }
        }

        let inv_l = T::from_f64c(1.0 / l_pb as f64);
        let inv_u = T::from_f64c(1.0 / u_pb as f64);
        let sup_sum = tape.add_many(&sup_terms);
        let sup_avg = tape.scale(sup_sum, inv_l);
        let unsup_sum = tape.add_many(&unsup_terms);
        let unsup_avg = tape.scale(unsup_sum, inv_u);
        let mut total_terms = alloc::vec![sup_avg, unsup_avg];
        let mut map_avg = None;
        if cfg.use_crln {
            let s = tape.add_many(&map_terms);
            let avg = tape.scale(s, inv_l);
            map_avg = Some(avg);
            total_terms.push(avg);
        }

        // ---- contrastive term ----
        let mut cps_var = None;
        let mut anchor_count = 0usize;
        if cfg.use_cps {
            let rows_snap: Vec<Tensor<T>> =
                rows_vars.iter().map(|&v| tape.value(v).clone()).collect();
            let bank = self.student.store.value(self.student.dim.prototypes_id()).clone();
            let mut class_losses = Vec::new();
            for class in 0..c {
                let xi = if cfg.stochastic_xi {
                    1.0 - rng.gen_range(0.0..1.0)
                } else {
                    cfg.xi
                };
                // candidates as (crop slot, voxel) pairs; slots order
                // labelled first, then unlabelled.
                let mut anchors: Vec<(usize, usize)> = Vec::new();
                let mut negatives: Vec<(usize, usize)> = Vec::new();
                let mut support = MeanAccumulator::new(self.student.cps.config().feat_proj);
                for (slot, lc) in labelled.iter().enumerate() {
                    for i in anchor_indices_labelled(&lc.classes, &probs_l_snap[slot], class, cfg.tau) {
                        anchors.push((slot, i));
                    }
                    for i in negative_indices_labelled(&lc.classes, class) {
                        negatives.push((slot, i));
                    }
                    let members: Vec<usize> = (0..cn)
                        .filter(|&i| lc.classes[i] as usize == class)
                        .collect();
                    support.add_row_major(&rows_snap[slot], &members);
                }
                for k in 0..u_pb {
                    let slot = l_pb + k;
                    for i in anchor_indices_unlabelled(
                        &probs_u_snap[k],
                        &targets[k],
                        class,
                        cfg.tau,
                        cfg.tau_w,
                    ) {
                        anchors.push((slot, i));
                    }
                    for i in negative_indices_unlabelled(&targets[k], class, cfg.tau_w) {
                        negatives.push((slot, i));
                    }
                    let members = support_indices_unlabelled(&targets[k], class, cfg.tau_w);
                    support.add_row_major(&rows_snap[slot], &members);
                }
                // Per-batch class mean with fallback to the previous value.
                let r_m = match support.mean() {
                    Some(m) => {
                        self.r_m[class] = Some(m.clone());
                        Some(m)
                    }
                    None => self.r_m[class].clone(),
                };
                let (Some(r_m), false, false) = (r_m, anchors.is_empty(), negatives.is_empty())
                else {
                    continue;
                };
                let anchors = pick_pairs(&mut rng, anchors, cfg.max_anchors);
                let negatives = pick_pairs(&mut rng, negatives, cfg.max_negatives);
                anchor_count += anchors.len();
                let proto = self.student.cps.bridged_prototype_mean(
                    &self.student.store,
                    &bank,
                    cfg.prototypes_per_class,
                    class,
                );
                let centre = positive_centre(&r_m, &proto, xi);
                let centre_t = Tensor::from_vec(
                    &[1, centre.len()],
                    centre.iter().map(|&v| T::from_f64c(v)).collect(),
                )
                .expect("centre row");
                let centre_v = tape.constant(centre_t);
                let anchors_v = gather_pairs(&mut tape, &rows_vars, &anchors);
                let negatives_v = gather_pairs(&mut tape, &rows_vars, &negatives);
                class_losses.push(self.student.cps.cps_loss(
                    &mut tape,
                    anchors_v,
                    centre_v,
                    negatives_v,
                ));
            }
            if !class_losses.is_empty() {
                cps_var = Some(tape.add_many(&class_losses));
            }
        }
        if let Some(v) = cps_var {
            total_terms.push(v);
        }

        let mut total = tape.add_many(&total_terms);
        if zero_losses {
            total = tape.scale(total, T::zero());
        }
        let stats_total = tape.value(total).item().to_f64c();
        if !stats_total.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite loss at iteration {iteration}"
            )));
        }
        let loss_supervised = tape.value(sup_avg).item().to_f64c();
        let loss_unsupervised = tape.value(unsup_avg).item().to_f64c();
        let loss_map_supervised =
            map_avg.map(|v| tape.value(v).item().to_f64c()).unwrap_or(0.0);
        let loss_contrastive = cps_var.map(|v| tape.value(v).item().to_f64c()).unwrap_or(0.0);

        // ---- main SGD step: everything except the rectification gate ----
        tape.backward(total);
        let gate: Vec<ParamId> = self.student.crln.learnable_params();
        let grads: Vec<Option<Tensor<T>>> = (0..self.student.store.len())
            .map(|i| {
                if gate.contains(&ParamId(i)) {
                    None
                } else {
                    tape.grad(vars[i]).cloned()
                }
            })
            .collect();
        drop(tape);
        self.opt.step(&mut self.student.store, &grads, T::from_f64c(lr));

        // ---- rectification-gate step: predictions and maps re-enter as
        // constants, only the gate parameters are live ----
        if cfg.use_crln && !gate.is_empty() {
            let mut mt: Tape<T> = Tape::new();
            let mvars = self
                .student
                .store
                .register_selective(&mut mt, |i, _| gate.contains(&ParamId(i)));
            let mut terms = Vec::with_capacity(l_pb);
            for (k, lc) in labelled.iter().enumerate() {
                let pred = mt.constant(probs_l_snap[k].clone());
                let map = mt.constant(map_l_snap[k].clone());
                let rect = self.student.crln.rectify_tape(&mut mt, &mvars, pred, map, cfg.tau);
                let target = mt.constant(lc.onehot.clone());
                terms.push(supervised_loss(&mut mt, rect, target));
            }
            let s = mt.add_many(&terms);
            let mut gate_loss = mt.scale(s, inv_l);
            if zero_losses {
                gate_loss = mt.scale(gate_loss, T::zero());
            }
            if !mt.value(gate_loss).item().to_f64c().is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite gate loss at iteration {iteration}"
                )));
            }
            mt.backward(gate_loss);
            let mgrads: Vec<Option<Tensor<T>>> = (0..self.student.store.len())
                .map(|i| {
                    if gate.contains(&ParamId(i)) {
                        mt.grad(mvars[i]).cloned()
                    } else {
                        None
                    }
                })
                .collect();
            drop(mt);
            self.opt.step(&mut self.student.store, &mgrads, T::from_f64c(lr));
        }

        // ---- teacher tracks the student ----
        ema_update(&mut self.teacher.store, &self.student.store, cfg.ema_decay, shared_by_copy);

        self.iteration = iteration;
        Ok(StepStats {
            iteration,
            lr,
            loss_total: stats_total,
            loss_supervised,
            loss_map_supervised,
            loss_unsupervised,
            loss_contrastive,
            mu: self.student.crln.mu_value(&self.student.store),
            rectification_active: rect_active,
            reliable_before,
            reliable_after,
            pseudo_dice_before,
            pseudo_dice_after,
            anchor_count,
        })
    }
}

/// Teacher-side prediction of one full volume with and without
/// rectification, scored against ground truth. Used for
/// rectification-quality reporting at checkpoints.
pub fn rectify_quality<T: Scalar>(
    model: &Model<T>,
    tau: f64,
    volume: &Volume,
    truth: &LabelMask,
) -> CoreResult<RectifyQuality> {
    if volume.dims() != truth.dims() {
        return Err(CoreError::Data("volume/truth dims mismatch".into()));
    }
    let mut tape: Tape<T> = Tape::new();
    let tvars = model.store.register_frozen(&mut tape);
    let vol = volume.normalized();
    let x = tape.constant(vol.to_tensor::<T>());
    let pyr = model.backbone.forward(&mut tape, &tvars, x);
    let probs = model.backbone.probabilities(&mut tape, &pyr);
    let base = tape.value(probs).clone();
    let map = model.dim.relationship_map(&mut tape, &tvars, pyr.f2, pyr.f3);
    let map_probs = tape.softmax_axis0(map);
    let map_t = tape.value(map_probs).clone();
    let rectified = model.crln.rectify_tensor(&model.store, &base, &map_t, tau)?;
    let c = truth.num_classes();
    Ok(RectifyQuality {
        reliable_before: reliable_fraction(&base, tau),
        reliable_after: reliable_fraction(&rectified, tau),
        dice_before: foreground_dice(&argmax_classes(&base), truth.classes(), c),
        dice_after: foreground_dice(&argmax_classes(&rectified), truth.classes(), c),
    })
}

/// Probability map of one full volume from a model (teacher weights are
/// the usual choice for evaluation). No gradients.
pub fn predict_probabilities<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut tape: Tape<T> = Tape::new();
    let tvars = model.store.register_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let pyr = model.backbone.forward(&mut tape, &tvars, xv);
    let probs = model.backbone.probabilities(&mut tape, &pyr);
    tape.value(probs).clone()
}

fn crop_tensor<T: Scalar>(data: &[f32], crop: [usize; 3]) -> Tensor<T> {
    Tensor::from_vec(
        &[1, crop[0], crop[1], crop[2]],
        data.iter().map(|&v| T::from_f64c(v as f64)).collect(),
    )
    .expect("crop tensor")
}

fn onehot_tensor<T: Scalar>(classes: &[u8], c: usize, crop: [usize; 3]) -> Tensor<T> {
    let n = crop[0] * crop[1] * crop[2];
    assert_eq!(classes.len(), n, "class count");
    let mut data = alloc::vec![T::zero(); c * n];
    for (i, &cls) in classes.iter().enumerate() {
        data[(cls as usize) * n + i] = T::one();
    }
    Tensor::from_vec(&[c, crop[0], crop[1], crop[2]], data).expect("onehot tensor")
}

fn reliable_fraction<T: Scalar>(probs: &Tensor<T>, tau: f64) -> f64 {
    let s = probs.shape();
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let t = T::from_f64c(tau);
    let d = probs.data();
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = d[i];
        for ch in 1..c {
            if d[ch * n + i] > best {
                best = d[ch * n + i];
            }
        }
        if best >= t {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn foreground_dice(pred: &[u8], truth: &[u8], num_classes: usize) -> f64 {
    let mut acc = 0.0;
    for class in 1..num_classes as u8 {
        let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
        let t: Vec<bool> = truth.iter().map(|&v| v == class).collect();
        acc += dice_binary(&p, &t);
    }
    acc / (num_classes - 1) as f64
}

fn mean_reliable<T: Scalar>(
    outs: &[TeacherOutput<T>],
    tau: f64,
    pick: impl Fn(&TeacherOutput<T>) -> &Tensor<T>,
) -> f64 {
    outs.iter().map(|o| reliable_fraction(pick(o), tau)).sum::<f64>() / outs.len() as f64
}

fn mean_pseudo_dice<T: Scalar>(
    outs: &[TeacherOutput<T>],
    truth_crops: &[Vec<u8>],
    num_classes: usize,
    pick: impl Fn(&TeacherOutput<T>) -> &Tensor<T>,
) -> f64 {
    outs.iter()
        .zip(truth_crops)
        .map(|(o, t)| foreground_dice(&argmax_classes(pick(o)), t, num_classes))
        .sum::<f64>()
        / outs.len() as f64
}

/// Uniform subsample of `(slot, voxel)` pairs, at most `k`.
fn pick_pairs(
    rng: &mut ChaCha8Rng,
    pairs: Vec<(usize, usize)>,
    k: usize,
) -> Vec<(usize, usize)> {
    if pairs.len() <= k {
        return pairs;
    }
    let positions = sample_without_replacement(rng, (0..pairs.len()).collect(), k);
    positions.into_iter().map(|p| pairs[p]).collect()
}

/// Gathers selected rows from per-slot row matrices and concatenates them.
fn gather_pairs<T: Scalar>(
    tape: &mut Tape<T>,
    rows_vars: &[Var],
    pairs: &[(usize, usize)],
) -> Var {
    let mut parts = Vec::new();
    for (slot, &rv) in rows_vars.iter().enumerate() {
        let idx: Vec<usize> =
            pairs.iter().filter(|(s, _)| *s == slot).map(|&(_, i)| i).collect();
        if !idx.is_empty() {
            parts.push(tape.gather_rows(rv, &idx));
        }
    }
    assert!(!parts.is_empty(), "no rows selected");
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    }
}
