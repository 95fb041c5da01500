//! Base classifiers: input form, Saab conv module, feature view and LSR FC
//! module, plus the rosters of the three diversity schemes.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetName, LabeledImageSet};
use crate::error::{invalid, shape_err, Result};
use crate::fc::{apply_fc, fit_fc_module, FcArch, FcModel};
use crate::forms::{InputForm, LawsKernel};
use crate::numerics::{argmax, derive_seed, rng_from_seed};
use crate::saab::{apply_cpca, fit_conv_pipeline, fit_cpca_on, ConvArch, ConvModel, ConvOutputs, CpcaBank};

/// Diversity scheme a roster entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    S1,
    S2,
    S3,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::S1, Scheme::S2, Scheme::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::S1 => "S1",
            Scheme::S2 => "S2",
            Scheme::S3 => "S3",
        }
    }
}

/// Which conv responses feed the FC module, and how they are reduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum FeatureView {
    /// C-PCA of the second conv layer to `k2` components per channel.
    Conv2 { k2: usize },
    /// Positions of the first conv layer with even `row + col`, C-PCA to `k1`.
    Conv1CheckerA { k1: usize },
    /// Positions with odd `row + col`.
    Conv1CheckerB { k1: usize },
    /// `⌊λ0·W·H⌋` random positions per channel of the first layer, C-PCA to
    /// `k1`, then `⌊λ1·k1⌋` random components per channel.
    Conv1Rd { lambda0: f64, k1: usize, lambda1: f64, seed: u64 },
    /// C-PCA of the second layer to `k2`, then `⌊λ2·k2⌋` random components
    /// per channel.
    Conv2Rd { lambda2: f64, k2: usize, seed: u64 },
}

impl FeatureView {
    /// Index of the conv layer the view reads (0 or 1).
    pub fn layer(&self) -> usize {
        match self {
            FeatureView::Conv2 { .. } | FeatureView::Conv2Rd { .. } => 1,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureView::Conv2 { .. } => "CONV2",
            FeatureView::Conv1CheckerA { .. } => "CONV1_CHECKER_A",
            FeatureView::Conv1CheckerB { .. } => "CONV1_CHECKER_B",
            FeatureView::Conv1Rd { .. } => "CONV1_RD",
            FeatureView::Conv2Rd { .. } => "CONV2_RD",
        }
    }

    fn with_seed_offset(&self, offset: u64) -> Self {
        match *self {
            FeatureView::Conv1Rd { lambda0, k1, lambda1, seed } => {
                FeatureView::Conv1Rd { lambda0, k1, lambda1, seed: seed.wrapping_add(offset) }
            }
            FeatureView::Conv2Rd { lambda2, k2, seed } => FeatureView::Conv2Rd { lambda2, k2, seed: seed.wrapping_add(offset) },
            ref other => other.clone(),
        }
    }
}

fn fraction_count(lambda: f64, total: usize, what: &str) -> Result<usize> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("{what} fraction {lambda} outside (0, 1)")));
    }
    let k = (lambda * total as f64).floor() as usize;
    if k == 0 {
        return Err(invalid(format!("{what} fraction {lambda} of {total} selects nothing")));
    }
    Ok(k)
}

fn sorted_sample(seed: u64, total: usize, amount: usize) -> Vec<usize> {
    let mut v = sample(&mut rng_from_seed(seed), total, amount).into_vec();
    v.sort_unstable();
    v
}

/// Spatial positions of a `h × w` map on one colour of the checkerboard.
pub fn checker_positions(h: usize, w: usize, odd: bool) -> Vec<usize> {
    (0..h * w).filter(|p| ((p / w + p % w) % 2 == 1) == odd).collect()
}

/// A feature view fitted on training conv outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedView {
    pub view: FeatureView,
    pub bank: CpcaBank,
    /// Kept columns of the C-PCA output, sorted; `None` keeps all.
    pub columns: Option<Vec<usize>>,
}

impl FittedView {
    pub fn output_dim(&self) -> usize {
        self.columns.as_ref().map_or(self.bank.output_dim(), Vec::len)
    }

    pub fn features(&self, outputs: &ConvOutputs) -> Result<Array2<f64>> {
        let maps = if self.view.layer() == 0 { &outputs.conv1 } else { &outputs.conv2 };
        let all = apply_cpca(&self.bank, maps.view())?;
        Ok(match &self.columns {
            Some(cols) => all.select(ndarray::Axis(1), cols),
            None => all,
        })
    }
}

/// Per-channel random component choice, returned as global column indices.
fn choose_components(channels: usize, per_channel: usize, keep: usize, seed: u64) -> Vec<usize> {
    let mut cols = Vec::with_capacity(channels * keep);
    for k in 0..channels {
        for j in sorted_sample(derive_seed(seed, 2 * k as u64 + 1), per_channel, keep) {
            cols.push(k * per_channel + j);
        }
    }
    cols
}

pub fn select_feature_view(outputs: &ConvOutputs, view: &FeatureView) -> Result<FittedView> {
    let maps = if view.layer() == 0 { &outputs.conv1 } else { &outputs.conv2 };
    let (c, h, w) = maps.shape();
    let all: Vec<usize> = (0..h * w).collect();
    let (bank, columns) = match *view {
        FeatureView::Conv2 { k2 } => (fit_cpca_on(maps.view(), &vec![all; c], k2)?, None),
        FeatureView::Conv1CheckerA { k1 } | FeatureView::Conv1CheckerB { k1 } => {
            let odd = matches!(view, FeatureView::Conv1CheckerB { .. });
            let pos = checker_positions(h, w, odd);
            (fit_cpca_on(maps.view(), &vec![pos; c], k1)?, None)
        }
        FeatureView::Conv1Rd { lambda0, k1, lambda1, seed } => {
            let npos = fraction_count(lambda0, h * w, "position")?;
            let keep = fraction_count(lambda1, k1, "component")?;
            let positions: Vec<Vec<usize>> = (0..c).map(|k| sorted_sample(derive_seed(seed, 2 * k as u64), h * w, npos)).collect();
            let bank = fit_cpca_on(maps.view(), &positions, k1)?;
            (bank, Some(choose_components(c, k1, keep, seed)))
        }
        FeatureView::Conv2Rd { lambda2, k2, seed } => {
            let keep = fraction_count(lambda2, k2, "component")?;
            let bank = fit_cpca_on(maps.view(), &vec![all; c], k2)?;
            (bank, Some(choose_components(c, k2, keep, seed)))
        }
    };
    Ok(FittedView { view: view.clone(), bank, columns })
}

/// Everything needed to build one base classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    /// Free-form label used in reports.
    pub name: String,
    pub tag: Scheme,
    pub form: InputForm,
    /// Filter sizes of the two conv layers.
    pub sizes: (usize, usize),
    /// Kernel counts of the two conv layers.
    pub kernels: (usize, usize),
    pub view: FeatureView,
    pub fc: FcArch,
    pub seed: u64,
}

impl BaseConfig {
    pub fn conv_arch(&self) -> ConvArch {
        ConvArch::new(self.form.channel_count(), self.sizes, self.kernels)
    }

    pub fn validate(&self) -> Result<()> {
        self.conv_arch().validate()?;
        self.fc.validate(self.fc.class_count())?;
        let s = (self.sizes.0, self.sizes.1);
        if ![(3, 3), (3, 5), (5, 3), (5, 5)].contains(&s) {
            return Err(invalid(format!("filter sizes {s:?} outside the four supported pairs")));
        }
        Ok(())
    }

    /// Names of model-relevant fields in which `self` and `other` differ.
    pub fn differing_fields(&self, other: &BaseConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.form != other.form {
            out.push("form");
        }
        if self.conv_arch() != other.conv_arch() {
            out.push("conv");
        }
        if self.view != other.view {
            out.push("view");
        }
        if self.fc != other.fc {
            out.push("fc");
        }
        if self.seed != other.seed {
            out.push("seed");
        }
        out
    }

    /// Same architecture with every random draw moved by `offset`.
    pub fn reseeded(&self, offset: u64) -> Self {
        Self { seed: self.seed.wrapping_add(offset), view: self.view.with_seed_offset(offset), ..self.clone() }
    }

    /// Configs that share this key share their fitted conv module.
    fn conv_key(&self) -> (InputForm, ConvArch, u64) {
        (self.form, self.conv_arch(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseClassifier {
    pub config: BaseConfig,
    pub conv: ConvModel,
    pub view: FittedView,
    pub fc: FcModel,
}

impl BaseClassifier {
    pub fn decide(&self, outputs: &ConvOutputs) -> Result<Array2<f64>> {
        let x = self.view.features(outputs)?;
        apply_fc(&self.fc, x.view())
    }
}

fn fit_members(
    configs: &[&BaseConfig],
    conv: &ConvModel,
    outputs: &ConvOutputs,
    labels: &[usize],
) -> Result<Vec<(BaseClassifier, Array2<f64>)>> {
    configs
        .par_iter()
        .map(|cfg| {
            let view = select_feature_view(outputs, &cfg.view)?;
            let x = view.features(outputs)?;
            let fc = fit_fc_module(x.view(), labels, &cfg.fc, derive_seed(cfg.seed, 3))?;
            let decisions = apply_fc(&fc, x.view())?;
            let base = BaseClassifier { config: (*cfg).clone(), conv: conv.clone(), view, fc };
            Ok((base, decisions))
        })
        .collect()
}

fn check_config_for(cfg: &BaseConfig, set: &LabeledImageSet) -> Result<()> {
    cfg.validate()?;
    if cfg.fc.class_count() != set.class_count {
        return Err(invalid(format!("{}: FC output {} for {} classes", cfg.name, cfg.fc.class_count(), set.class_count)));
    }
    Ok(())
}

/// Groups roster indices by conv key in order of first appearance.
fn conv_groups(configs: &[BaseConfig]) -> Vec<Vec<usize>> {
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashMap<(InputForm, ConvArch, u64), usize> = HashMap::new();
    for (i, c) in configs.iter().enumerate() {
        let g = *seen.entry(c.conv_key()).or_insert_with(|| {
            order.push(Vec::new());
            order.len() - 1
        });
        order[g].push(i);
    }
    order
}

pub fn train_base(config: &BaseConfig, train: &LabeledImageSet) -> Result<BaseClassifier> {
    let (mut bases, _) = train_roster(std::slice::from_ref(config), train)?;
    Ok(bases.remove(0))
}

/// Trains every roster entry, fitting each distinct (form, conv arch, seed)
/// conv module once. Returns the bases in roster order together with their
/// decision vectors on the training set.
pub fn train_roster(configs: &[BaseConfig], train: &LabeledImageSet) -> Result<(Vec<BaseClassifier>, Vec<Array2<f64>>)> {
    if configs.is_empty() {
        return Err(invalid("empty roster"));
    }
    for c in configs {
        check_config_for(c, train)?;
    }
    let mut slots: Vec<Option<(BaseClassifier, Array2<f64>)>> = vec![None; configs.len()];
    for group in conv_groups(configs) {
        let first = &configs[group[0]];
        log::info!(
            "fitting conv module {} {:?}/{:?} seed {} for {} base(s)",
            first.form,
            first.sizes,
            first.kernels,
            first.seed,
            group.len()
        );
        let input = first.form.apply(train)?;
        let (conv, outputs) = fit_conv_pipeline(&input, &first.conv_arch(), derive_seed(first.seed, 2))?;
        drop(input);
        // Identical configs within a group are trained once.
        let mut unique: Vec<usize> = Vec::new();
        for &i in &group {
            if !unique.iter().any(|&u| configs[u] == configs[i]) {
                unique.push(i);
            }
        }
        let members: Vec<&BaseConfig> = unique.iter().map(|&i| &configs[i]).collect();
        let fitted = fit_members(&members, &conv, &outputs, &train.labels)?;
        for &i in &group {
            let u = unique.iter().position(|&u| configs[u] == configs[i]).expect("present");
            let (base, dec) = &fitted[u];
            let mut base = base.clone();
            base.config = configs[i].clone();
            slots[i] = Some((base, dec.clone()));
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("every slot filled")).unzip())
}

/// Decision vectors of every base on `set`, in roster order. Bases whose conv
/// modules coincide share one forward pass.
pub fn predict_roster(bases: &[BaseClassifier], set: &LabeledImageSet) -> Result<Vec<Array2<f64>>> {
    let mut out: Vec<Option<Array2<f64>>> = vec![None; bases.len()];
    let mut done = vec![false; bases.len()];
    for i in 0..bases.len() {
        if done[i] {
            continue;
        }
        let lead = &bases[i];
        if lead.config.fc.class_count() != set.class_count {
            return Err(shape_err(format!(
                "{} predicts {} classes on a {}-class set",
                lead.config.name,
                lead.config.fc.class_count(),
                set.class_count
            )));
        }
        let input = lead.config.form.apply(set)?;
        let outputs = lead.conv.forward(input.images.view())?;
        drop(input);
        let group: Vec<usize> =
            (i..bases.len()).filter(|&j| !done[j] && bases[j].config.form == lead.config.form && bases[j].conv == lead.conv).collect();
        let decided: Vec<Array2<f64>> = group.par_iter().map(|&j| bases[j].decide(&outputs)).collect::<Result<_>>()?;
        for (&j, d) in group.iter().zip(decided) {
            out[j] = Some(d);
            done[j] = true;
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every base predicted")).collect())
}

/// Row-wise argmax, ties to the lowest class index.
pub fn argmax_rows(decisions: ArrayView2<'_, f64>) -> Vec<usize> {
    decisions.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}

pub fn predict_base(base: &BaseClassifier, set: &LabeledImageSet) -> Result<(Array2<f64>, Vec<usize>)> {
    let decisions = predict_roster(std::slice::from_ref(base), set)?.remove(0);
    let labels = argmax_rows(decisions.view());
    Ok((decisions, labels))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Named rosters of the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RosterPreset {
    /// FF-1 alone.
    Single,
    /// Four filter-size combinations.
    Scheme1,
    /// Conv2 view plus the two checkerboard views of conv1.
    Ed1,
    /// Six random conv1 subsets.
    Ed2,
    /// Twelve random conv2 subsets.
    Ed3,
    /// Ed2 followed by Ed3.
    Ed4,
    /// One base per input form.
    Scheme3,
    /// Scheme 1, Ed1 and Scheme 3 in that order.
    All,
}

/// Per-dataset constants of the experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDefaults {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
    pub fc: FcArch,
    pub forms: Vec<InputForm>,
    pub primary_form: InputForm,
}

impl DatasetDefaults {
    pub fn for_dataset(dataset: DatasetName) -> Self {
        let laws = LawsKernel::ALL.iter().map(|&k| InputForm::Laws(k));
        match dataset {
            DatasetName::Mnist => Self {
                k1: 30,
                k2: 20,
                lambda: 0.75,
                fc: FcArch::new(vec![120, 84, 10]),
                forms: std::iter::once(InputForm::Gray).chain(laws).collect(),
                primary_form: InputForm::Gray,
            },
            DatasetName::Cifar10 => Self {
                k1: 20,
                k2: 12,
                lambda: 0.75,
                fc: FcArch::new(vec![200, 100, 10]),
                forms: [
                    InputForm::Rgb,
                    InputForm::YcbcrY,
                    InputForm::YcbcrCb,
                    InputForm::YcbcrCr,
                    InputForm::LabL,
                    InputForm::LabA,
                    InputForm::LabB,
                ]
                .into_iter()
                .chain(laws)
                .collect(),
                primary_form: InputForm::Rgb,
            },
        }
    }
}

/// Kernel counts for a filter-size pair. MNIST uses (6,16) throughout; on
/// CIFAR-10 a 3×3 first layer gets fewer kernels than a 5×5 one.
pub fn default_kernels(dataset: DatasetName, form: InputForm, sizes: (usize, usize)) -> (usize, usize) {
    match dataset {
        DatasetName::Mnist => (6, 16),
        DatasetName::Cifar10 => {
            let rgb = form.channel_count() == 3;
            match (sizes, rgb) {
                ((5, 5), true) | ((5, 3), true) => (32, 64),
                ((3, 5), true) => (24, 64),
                ((3, 3), true) => (24, 48),
                ((5, 5), false) | ((5, 3), false) => (16, 32),
                ((3, 5), false) => (8, 32),
                _ => (8, 24),
            }
        }
    }
}

/// The four filter-size pairs in table order FF-1 … FF-4.
pub const SCHEME1_SIZES: [(usize, usize); 4] = [(5, 5), (5, 3), (3, 5), (3, 3)];

pub fn preset_roster(dataset: DatasetName, preset: RosterPreset) -> Vec<BaseConfig> {
    preset_roster_with(dataset, preset, &DatasetDefaults::for_dataset(dataset), 0)
}

/// Builds a preset roster from explicit constants, with every base seeded by
/// `seed`.
pub fn preset_roster_with(dataset: DatasetName, preset: RosterPreset, d: &DatasetDefaults, seed: u64) -> Vec<BaseConfig> {
    let base = |name: String, tag: Scheme, form: InputForm, sizes: (usize, usize), view: FeatureView| BaseConfig {
        name,
        tag,
        form,
        sizes,
        kernels: default_kernels(dataset, form, sizes),
        view,
        fc: d.fc.clone(),
        seed,
    };
    let conv2 = FeatureView::Conv2 { k2: d.k2 };
    let ff1 = |name: &str, tag: Scheme, view: FeatureView| base(name.into(), tag, d.primary_form, (5, 5), view);
    let ed2 = || {
        (0..6u64).map(move |s| {
            ff1(
                &format!("Conv1-RD-{s}"),
                Scheme::S2,
                FeatureView::Conv1Rd { lambda0: d.lambda, k1: d.k1, lambda1: d.lambda, seed: seed.wrapping_add(s) },
            )
        })
    };
    let ed3 = || {
        (0..12u64).map(move |s| {
            ff1(&format!("Conv2-RD-{s}"), Scheme::S2, FeatureView::Conv2Rd { lambda2: d.lambda, k2: d.k2, seed: seed.wrapping_add(s) })
        })
    };
    let scheme1 = || {
        SCHEME1_SIZES
            .iter()
            .enumerate()
            .map(|(i, &sz)| base(format!("FF-{}", i + 1), Scheme::S1, d.primary_form, sz, conv2.clone()))
            .collect::<Vec<_>>()
    };
    let ed1 = || {
        vec![
            ff1("Conv2", Scheme::S2, conv2.clone()),
            ff1("Conv1-1", Scheme::S2, FeatureView::Conv1CheckerA { k1: d.k1 }),
            ff1("Conv1-2", Scheme::S2, FeatureView::Conv1CheckerB { k1: d.k1 }),
        ]
    };
    let scheme3 = || d.forms.iter().map(|&f| base(f.to_string(), Scheme::S3, f, (5, 5), conv2.clone())).collect::<Vec<_>>();
    match preset {
        RosterPreset::Single => vec![ff1("FF-1", Scheme::S1, conv2.clone())],
        RosterPreset::Scheme1 => scheme1(),
        RosterPreset::Ed1 => ed1(),
        RosterPreset::Ed2 => ed2().collect(),
        RosterPreset::Ed3 => ed3().collect(),
        RosterPreset::Ed4 => ed2().chain(ed3()).collect(),
        RosterPreset::Scheme3 => scheme3(),
        RosterPreset::All => {
            let mut v = scheme1();
            v.extend(ed1());
            v.extend(scheme3());
            v
        }
    }
}
