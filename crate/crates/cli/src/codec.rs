//! Conversion between fitted ensembles and [`ModelFile`] sections.

use ffcnn::ensemble::{EnsembleModel, MetaClassifier};
use ffcnn::fc::{FcModel, FcStage};
use ffcnn::ffcnn::{BaseClassifier, BaseConfig, FittedView};
use ffcnn::numerics::{LinearMap, PcaBasis};
use ffcnn::saab::{ChannelPca, ConvModel, CpcaBank, SaabLayer};
use ffcnn::svm::{PairModel, SvmModel};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

/// Structural description stored as the file's JSON meta section. All real
/// numbers live in array sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: ExperimentConfig,
    ensemble: EnsembleMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleMeta {
    class_count: usize,
    bases: Vec<BaseMeta>,
    pairs: Vec<(usize, usize)>,
    hard: Option<Box<EnsembleMeta>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaseMeta {
    config: BaseConfig,
    cpca_height: usize,
    cpca_width: usize,
    cpca_channels: usize,
    has_columns: bool,
    fc_rectified: Vec<bool>,
}

/// A stored ensemble together with the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub config: ExperimentConfig,
    pub model: EnsembleModel,
}

pub fn encode(config: &ExperimentConfig, model: &EnsembleModel) -> CliResult<ModelFile> {
    let mut file = ModelFile::new(String::new());
    let ensemble = encode_ensemble(&mut file, "e.", model);
    let meta = Meta { config: config.clone(), ensemble };
    file.meta = serde_json::to_string(&meta).map_err(|e| CliError::Config(format!("serializing model meta: {e}")))?;
    Ok(file)
}

pub fn decode(file: &ModelFile) -> CliResult<StoredModel> {
    let meta: Meta = serde_json::from_str(&file.meta).map_err(|e| corrupt(format!("model meta: {e}")))?;
    let model = decode_ensemble(file, "e.", &meta.ensemble)?;
    Ok(StoredModel { config: meta.config, model })
}

fn corrupt(msg: String) -> CliError {
    CliError::ModelFile { path: Default::default(), msg }
}

fn encode_ensemble(f: &mut ModelFile, p: &str, m: &EnsembleModel) -> EnsembleMeta {
    f.push_scalars(format!("{p}thresholds"), &[m.t1, m.t2]);
    let mut bases = Vec::new();
    for (i, b) in m.bases.iter().enumerate() {
        let q = format!("{p}b{i}.");
        for (l, layer) in b.conv.layers.iter().enumerate() {
            f.push_array(format!("{q}conv{l}.kernels"), &layer.kernels);
            f.push_scalars(format!("{q}conv{l}.bias"), &[layer.bias]);
        }
        for (c, ch) in b.view.bank.channels.iter().enumerate() {
            f.push_indices(format!("{q}cpca{c}.positions"), &ch.positions);
            push_basis(f, &format!("{q}cpca{c}."), &ch.basis);
        }
        if let Some(cols) = &b.view.columns {
            f.push_indices(format!("{q}columns"), cols);
        }
        for (s, stage) in b.fc.stages.iter().enumerate() {
            f.push_array(format!("{q}fc{s}.weights"), &stage.map.weights);
            f.push_array(format!("{q}fc{s}.bias"), &stage.map.bias);
        }
        bases.push(BaseMeta {
            config: b.config.clone(),
            cpca_height: b.view.bank.height,
            cpca_width: b.view.bank.width,
            cpca_channels: b.view.bank.channels.len(),
            has_columns: b.view.columns.is_some(),
            fc_rectified: b.fc.stages.iter().map(|s| s.rectified).collect(),
        });
    }
    push_basis(f, &format!("{p}fusion."), &m.meta.basis);
    let svm = &m.meta.svm;
    f.push_scalars(format!("{p}svm.params"), &[svm.c, svm.gamma, svm.tol]);
    f.push_array(format!("{p}svm.mean"), &svm.mean);
    f.push_array(format!("{p}svm.scale"), &svm.scale);
    f.push_array(format!("{p}svm.support"), &svm.support);
    for (k, pair) in svm.pairs.iter().enumerate() {
        f.push_indices(format!("{p}svm.pair{k}.sv"), &pair.support_indices);
        f.push_scalars(format!("{p}svm.pair{k}.coef"), &pair.coef);
        f.push_scalars(format!("{p}svm.pair{k}.intercept"), &[pair.intercept]);
    }
    let hard = m.hard.as_ref().map(|h| Box::new(encode_ensemble(f, &format!("{p}hard."), h)));
    EnsembleMeta { class_count: svm.class_count, bases, pairs: svm.pairs.iter().map(|p| (p.positive, p.negative)).collect(), hard }
}

fn push_basis(f: &mut ModelFile, p: &str, b: &PcaBasis) {
    f.push_array(format!("{p}mean"), &b.mean().to_owned());
    f.push_array(format!("{p}components"), &b.components().to_owned());
    f.push_array(format!("{p}eigenvalues"), &b.eigenvalues().to_owned());
}

fn read_basis(f: &ModelFile, p: &str) -> CliResult<PcaBasis> {
    Ok(PcaBasis::from_parts(f.array1(&format!("{p}mean"))?, f.array2(&format!("{p}components"))?, f.array1(&format!("{p}eigenvalues"))?)?)
}

fn one(f: &ModelFile, name: &str) -> CliResult<f64> {
    match f.scalars(name)?.as_slice() {
        [v] => Ok(*v),
        other => Err(corrupt(format!("section {name} holds {} values, expected 1", other.len()))),
    }
}

fn decode_ensemble(f: &ModelFile, p: &str, meta: &EnsembleMeta) -> CliResult<EnsembleModel> {
    let t = f.scalars(&format!("{p}thresholds"))?;
    if t.len() != 2 {
        return Err(corrupt("thresholds section must hold 2 values".into()));
    }
    let mut bases = Vec::new();
    for (i, bm) in meta.bases.iter().enumerate() {
        let q = format!("{p}b{i}.");
        let arch = bm.config.conv_arch();
        let layer = |l: usize| -> CliResult<SaabLayer> {
            let spec = arch.layers[l];
            let in_ch = if l == 0 { arch.input_channels } else { arch.layers[0].kernels };
            Ok(SaabLayer::from_parts(spec.size, in_ch, f.array2(&format!("{q}conv{l}.kernels"))?, one(f, &format!("{q}conv{l}.bias"))?)?)
        };
        let conv = ConvModel { arch, layers: [layer(0)?, layer(1)?] };
        let channels = (0..bm.cpca_channels)
            .map(|c| {
                Ok(ChannelPca { positions: f.indices(&format!("{q}cpca{c}.positions"))?, basis: read_basis(f, &format!("{q}cpca{c}."))? })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let bank = CpcaBank { height: bm.cpca_height, width: bm.cpca_width, channels };
        let columns = if bm.has_columns { Some(f.indices(&format!("{q}columns"))?) } else { None };
        let view = FittedView { view: bm.config.view.clone(), bank, columns };
        let stages = bm
            .fc_rectified
            .iter()
            .enumerate()
            .map(|(s, &rectified)| {
                let map = LinearMap::new(f.array2(&format!("{q}fc{s}.weights"))?, f.array1(&format!("{q}fc{s}.bias"))?)?;
                Ok(FcStage { map, rectified })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let fc = FcModel::new(stages)?;
        bases.push(BaseClassifier { config: bm.config.clone(), conv, view, fc });
    }
    let basis = read_basis(f, &format!("{p}fusion."))?;
    let params = f.scalars(&format!("{p}svm.params"))?;
    if params.len() != 3 {
        return Err(corrupt("svm.params must hold 3 values".into()));
    }
    let pairs = meta
        .pairs
        .iter()
        .enumerate()
        .map(|(k, &(positive, negative))| {
            Ok(PairModel {
                positive,
                negative,
                support_indices: f.indices(&format!("{p}svm.pair{k}.sv"))?,
                coef: f.scalars(&format!("{p}svm.pair{k}.coef"))?,
                intercept: one(f, &format!("{p}svm.pair{k}.intercept"))?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let svm = SvmModel {
        class_count: meta.class_count,
        c: params[0],
        gamma: params[1],
        tol: params[2],
        mean: f.array1(&format!("{p}svm.mean"))?,
        scale: f.array1(&format!("{p}svm.scale"))?,
        support: f.array2(&format!("{p}svm.support"))?,
        pairs,
    };
    let n_sv = svm.support.nrows();
    for pair in &svm.pairs {
        if pair.support_indices.len() != pair.coef.len() || pair.support_indices.iter().any(|&i| i >= n_sv) {
            return Err(corrupt(format!("pair ({}, {}) support vectors inconsistent", pair.positive, pair.negative)));
        }
    }
    let hard = match &meta.hard {
        Some(h) => Some(decode_ensemble(f, &format!("{p}hard."), h)?),
        None => None,
    };
    Ok(EnsembleModel::new(bases, MetaClassifier { basis, svm }, t[0], t[1], hard)?)
}
