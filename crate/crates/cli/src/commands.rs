//! Model-level commands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use capsnet_core::arch::Architecture;
use capsnet_core::kernels::{QTensor, Strategy};
use capsnet_core::layers::{forward, forward_traced, predict, scores_to_f32, QuantModel};
use capsnet_core::model_io::{
    load_float_model, load_quantized_model, save_float_model, save_quantized_model, Dataset, Samples,
};
use capsnet_core::parallel::ExecConfig;
use capsnet_core::qcore::{quantize_tensor, QFormat};
use capsnet_core::quantizer::{quantize_model, Footprint};
use capsnet_core::reference::{argmax, float_forward, FloatModel};
use capsnet_core::site::{RecordingProbe, SiteId};
use capsnet_core::Error;

use crate::{
    parse_dims, CliError, CliResult, CompareArgs, EvalArgs, ExecArgs, GenerateCommand, InferArgs, QuantizeArgs,
};

pub fn exec_config(a: &ExecArgs) -> CliResult<ExecConfig> {
    let strategy: Strategy = a.strategy.parse().map_err(CliError::Usage)?;
    if a.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    Ok(ExecConfig::new(strategy, a.workers).with_conv_partition(a.conv_partition.into()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn blob_path(manifest: &Path, blob: &Option<PathBuf>) -> PathBuf {
    blob.clone().unwrap_or_else(|| manifest.with_extension("bin"))
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn scores_checksum(scores: &[u32]) -> String {
    let bytes: Vec<u8> = scores.iter().flat_map(|s| s.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

fn check_shape(ds: &Dataset, arch: &Architecture) -> CliResult<()> {
    let s = arch.input;
    if (ds.h as usize, ds.w as usize, ds.c as usize) != (s.h, s.w, s.c) {
        return Err(Error::Shape(format!(
            "dataset samples are {}x{}x{}, model expects {}x{}x{}",
            ds.h, ds.w, ds.c, s.h, s.w, s.c
        ))
        .into());
    }
    Ok(())
}

fn sample_tensor(ds: &Dataset, i: usize, model: &QuantModel) -> CliResult<QTensor> {
    let s = model.arch.input;
    Ok(QTensor::new(
        ds.sample_q7(i, model.input_fmt)?,
        s.h,
        s.w,
        s.c,
        model.input_fmt,
    )?)
}

/// Uniform `[0, 1)` samples from a seeded generator.
pub fn synthetic_samples(len: usize, count: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random::<f32>()).collect())
        .collect()
}

#[derive(Debug, Clone)]
pub struct QuantizeReport {
    pub manifest: PathBuf,
    pub blob: PathBuf,
    pub footprint: Footprint,
    pub blob_bytes: usize,
    pub warnings: Vec<String>,
}

impl fmt::Display for QuantizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fp = &self.footprint;
        writeln!(f, "wrote {} and {}", self.manifest.display(), self.blob.display())?;
        writeln!(f, "parameters  {}", fp.parameters)?;
        writeln!(f, "float       {:.2} KB", fp.float_kb())?;
        writeln!(f, "int-8       {:.2} KB", fp.int8_kb())?;
        writeln!(f, "blob        {} B", self.blob_bytes)?;
        writeln!(f, "metadata    {} B ({:.4}%)", fp.metadata_bytes, fp.metadata_percent())?;
        writeln!(f, "saving      {:.2}%", fp.saving_percent())?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

pub fn cmd_quantize(a: &QuantizeArgs) -> CliResult<QuantizeReport> {
    let model = load_float_model(&a.model, &a.weights)?;
    let calib = Dataset::load(&a.calib)?;
    if calib.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    check_shape(&calib, &model.arch)?;
    let q = quantize_model(&model, &calib.all_f32())?;
    let manifest = with_suffix(&a.out_prefix, ".q7.json");
    let blob = with_suffix(&a.out_prefix, ".q7.bin");
    save_quantized_model(&q.model, &manifest, &blob)?;
    let blob_bytes = std::fs::metadata(&blob).map_err(|e| Error::Io {
        path: blob.clone(),
        source: e,
    })?;
    Ok(QuantizeReport {
        manifest,
        blob,
        footprint: Footprint::of(&q.model),
        blob_bytes: blob_bytes.len() as usize,
        warnings: q.warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferReport {
    pub class: usize,
    pub scores: Vec<u32>,
    pub checksum: String,
}

impl fmt::Display for InferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class     {}", self.class)?;
        let scores: Vec<String> = self.scores.iter().map(u32::to_string).collect();
        writeln!(f, "scores    {}", scores.join(" "))?;
        writeln!(f, "checksum  {}", self.checksum)
    }
}

pub fn cmd_infer(a: &InferArgs) -> CliResult<InferReport> {
    let exec = exec_config(&a.exec)?;
    let model = load_quantized_model(&a.qmodel, blob_path(&a.qmodel, &a.qweights))?;
    let ds = Dataset::load(&a.input)?;
    check_shape(&ds, &model.arch)?;
    if a.index >= ds.len() {
        return Err(CliError::Usage(format!(
            "--index {} out of range for {} samples",
            a.index,
            ds.len()
        )));
    }
    let scores = forward(&model, &sample_tensor(&ds, a.index, &model)?, &exec)?;
    Ok(InferReport {
        class: predict(&scores),
        checksum: scores_checksum(&scores),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
}

impl EvalReport {
    pub fn accuracy_percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.accuracy_percent() {
            Some(p) => writeln!(f, "accuracy  {p:.2}% ({}/{})", self.correct, self.total),
            None => writeln!(f, "accuracy  n/a (0/0)"),
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let exec = exec_config(&a.exec)?;
    let model = load_quantized_model(&a.qmodel, blob_path(&a.qmodel, &a.qweights))?;
    let ds = Dataset::load(&a.dataset)?;
    check_shape(&ds, &model.arch)?;
    let mut correct = 0;
    for i in 0..ds.len() {
        let scores = forward(&model, &sample_tensor(&ds, i, &model)?, &exec)?;
        if predict(&scores) == ds.labels[i] as usize {
            correct += 1;
        }
    }
    Ok(EvalReport {
        correct,
        total: ds.len(),
    })
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub agree: usize,
    pub total: usize,
    /// Mean absolute difference of class scores (capsule lengths).
    pub mean_score_deviation: f64,
    /// Largest absolute difference per site, over all samples.
    pub sites: Vec<(SiteId, f32)>,
}

impl CompareReport {
    pub fn agreement_percent(&self) -> f64 {
        if self.total == 0 {
            100.0
        } else {
            100.0 * self.agree as f64 / self.total as f64
        }
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "agreement        {:.2}% ({}/{})",
            self.agreement_percent(),
            self.agree,
            self.total
        )?;
        writeln!(f, "score deviation  {:.6}", self.mean_score_deviation)?;
        writeln!(f, "site,max_abs_deviation")?;
        for (site, d) in &self.sites {
            writeln!(f, "{site},{d:.6}")?;
        }
        Ok(())
    }
}

pub fn cmd_compare(a: &CompareArgs) -> CliResult<CompareReport> {
    let exec = exec_config(&a.exec)?;
    let fmodel = load_float_model(&a.fmodel, &a.weights)?;
    let qmodel = load_quantized_model(&a.qmodel, blob_path(&a.qmodel, &a.qweights))?;
    if fmodel.arch != qmodel.arch {
        return Err(Error::Shape("float and quantized models have different architectures".into()).into());
    }
    let ds = Dataset::load(&a.dataset)?;
    check_shape(&ds, &fmodel.arch)?;
    compare_models(&fmodel, &qmodel, &ds.all_f32(), &exec)
}

/// Runs both models on every sample, collecting argmax agreement, score
/// deviation and per-site deviation.
pub fn compare_models(
    fmodel: &FloatModel,
    qmodel: &QuantModel,
    samples: &[Vec<f32>],
    exec: &ExecConfig,
) -> CliResult<CompareReport> {
    let mut sites: BTreeMap<SiteId, f32> = BTreeMap::new();
    let (mut agree, mut dev_sum, mut dev_n) = (0, 0.0f64, 0usize);
    for x in samples {
        let mut fp = RecordingProbe::default();
        let mut qp = RecordingProbe::default();
        let fs = float_forward(fmodel, x, &mut fp)?;
        let qs = forward_traced(qmodel, &qmodel.quantize_input(x)?, exec, &mut qp)?;
        if argmax(&fs) == predict(&qs) {
            agree += 1;
        }
        for (a, b) in fs.iter().zip(scores_to_f32(&qs)) {
            dev_sum += (a - b).abs() as f64;
            dev_n += 1;
        }
        for (site, fv) in &fp.sites {
            let Some(qv) = qp.get(*site) else {
                return Err(Error::Invariant(format!("int-8 pass did not report {site}")).into());
            };
            let d = fv.iter().zip(qv).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            let e = sites.entry(*site).or_insert(0.0);
            *e = e.max(d);
        }
    }
    Ok(CompareReport {
        agree,
        total: samples.len(),
        mean_score_deviation: if dev_n == 0 { 0.0 } else { dev_sum / dev_n as f64 },
        sites: sites.into_iter().collect(),
    })
}

#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub paths: Vec<PathBuf>,
}

impl fmt::Display for GenerateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.paths {
            writeln!(f, "wrote {}", p.display())?;
        }
        Ok(())
    }
}

pub fn cmd_generate(g: &GenerateCommand) -> CliResult<GenerateReport> {
    match g {
        GenerateCommand::Model(a) => {
            let arch = Architecture::preset(&a.arch).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown architecture {:?}; expected one of {}",
                    a.arch,
                    Architecture::PRESETS.join(", ")
                ))
            })?;
            if !(a.std.is_finite() && a.std >= 0.0) {
                return Err(CliError::Usage("--std must be finite and non-negative".into()));
            }
            let model = FloatModel::random(arch, a.std, a.seed)?;
            let manifest = with_suffix(&a.out_prefix, ".json");
            let blob = with_suffix(&a.out_prefix, ".bin");
            save_float_model(&model, &manifest, &blob)?;
            Ok(GenerateReport {
                paths: vec![manifest, blob],
            })
        }
        GenerateCommand::Dataset(a) => {
            let dims = parse_dims(&a.shape, 3)?;
            let dim = |d: usize| u16::try_from(d).map_err(|_| CliError::Usage(format!("dimension {d} exceeds 65535")));
            let (h, w, c) = (dim(dims[0])?, dim(dims[1])?, dim(dims[2])?);
            if a.classes == 0 {
                return Err(CliError::Usage("--classes must be at least 1".into()));
            }
            let len = dims.iter().product();
            let data: Vec<f32> = synthetic_samples(len, a.count as usize, a.seed).concat();
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1));
            let labels = (0..a.count).map(|_| rng.random_range(0..a.classes)).collect();
            let samples = if a.int8 {
                Samples::I8(quantize_tensor(&data, QFormat::Q0_7)?)
            } else {
                Samples::F32(data)
            };
            Dataset::new(h, w, c, samples, labels)?.save(&a.out)?;
            Ok(GenerateReport {
                paths: vec![a.out.clone()],
            })
        }
    }
}
