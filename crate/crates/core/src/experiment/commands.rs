use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use pilotforge_nn::Checkpoint;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::report::{write_csv, ReportRow};
use crate::channel::{add_awgn, generate_dataset, noise_variance, ChannelDataset, SPLIT_NAMES};
use crate::channelnet::{mse, train_end_to_end, EstimatorPipeline};
use crate::error::{Error, Result};
use crate::estimators::{
    equally_spaced_pattern, fit_statistics, mmse_estimate, ChannelStatistics, PilotObservation,
};
use crate::grid::ComplexGrid;
use crate::seed;
use crate::selection::train::gathered_input;
use crate::selection::{
    extract_pattern, train_decoder, train_selector, Decoder, DecoderNet, History, PilotPattern,
    SelectorOutcome, SELECTOR_LOGITS,
};

pub const METHOD_CAE: &str = "cae-channelnet";
pub const METHOD_LS_DECODER: &str = "ls-decoder";
pub const METHOD_MMSE: &str = "ideal-mmse";

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternSource {
    Cae,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SnrWindow {
    Full,
    Low,
    High,
}

impl fmt::Display for PatternSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternSource::Cae => "cae",
            PatternSource::Uniform => "uniform",
        })
    }
}

impl FromStr for PatternSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cae" => Ok(PatternSource::Cae),
            "uniform" | "equally-spaced" => Ok(PatternSource::Uniform),
            other => Err(Error::Config(format!(
                "unknown pattern source `{other}` (expected cae or uniform)"
            ))),
        }
    }
}

impl fmt::Display for SnrWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SnrWindow::Full => "full",
            SnrWindow::Low => "low",
            SnrWindow::High => "high",
        })
    }
}

impl FromStr for SnrWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SnrWindow::Full),
            "low" => Ok(SnrWindow::Low),
            "high" => Ok(SnrWindow::High),
            other => Err(Error::Config(format!(
                "unknown SNR window `{other}` (expected full, low or high)"
            ))),
        }
    }
}

impl SnrWindow {
    pub fn contains(self, snr_db: f64, split_db: f64) -> bool {
        match self {
            SnrWindow::Full => true,
            SnrWindow::Low => snr_db <= split_db,
            SnrWindow::High => snr_db >= split_db,
        }
    }

    pub fn apply(self, dataset: &ChannelDataset, split_db: f64) -> Result<ChannelDataset> {
        let kept = dataset.filter_snr(|s| self.contains(s as f64, split_db));
        if kept.is_empty() {
            return Err(Error::Config(format!(
                "SNR window `{self}` around {split_db} dB keeps no training frames"
            )));
        }
        Ok(kept)
    }
}

/// Where every artifact of one experiment lives under `out_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.data_dir().join(format!("{name}.pfds"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.txt")
    }

    pub fn select_dir(&self, np: usize) -> PathBuf {
        self.root.join("select").join(format!("np{np}"))
    }

    pub fn pattern(&self, np: usize) -> PathBuf {
        self.select_dir(np).join("pattern.txt")
    }

    pub fn selector(&self, np: usize) -> PathBuf {
        self.select_dir(np).join("selector.ckpt")
    }

    pub fn train_dir(&self, source: PatternSource, window: SnrWindow, np: usize) -> PathBuf {
        self.root
            .join("train")
            .join(format!("{source}-{window}-np{np}"))
    }

    pub fn pipeline(&self, source: PatternSource, window: SnrWindow, np: usize) -> PathBuf {
        self.train_dir(source, window, np).join("pipeline.ckpt")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.eval_dir().join("report.csv")
    }

    pub fn statistics(&self, np: usize) -> PathBuf {
        self.eval_dir().join(format!("stats-np{np}.pfst"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            what: what.to_string(),
            path: path.display().to_string(),
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_split(cfg: &ExperimentConfig, name: &str) -> Result<ChannelDataset> {
    let path = Layout::new(cfg).split(name);
    require(&path, &format!("{name} dataset (run gen-data first)"))?;
    let ds = ChannelDataset::load(&path)?;
    if ds.header.nf != cfg.nf || ds.header.nn != cfg.nn {
        return Err(Error::Config(format!(
            "{} holds {}x{} frames but the config asks for {}x{}",
            path.display(),
            ds.header.nf,
            ds.header.nn,
            cfg.nf,
            cfg.nn
        )));
    }
    Ok(ds)
}

fn history_csv(h: &History) -> String {
    let mut text = String::from("epoch,loss,mean_max_prob,temperature\n");
    for (i, loss) in h.loss.iter().enumerate() {
        let opt = |v: Option<&f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        text.push_str(&format!(
            "{i},{loss:e},{},{}\n",
            opt(h.mean_max_prob.get(i)),
            opt(h.temperature.get(i))
        ));
    }
    text
}

/// Generates the train / val / test splits and a manifest; returns the manifest hash.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    create_dir(&layout.data_dir())?;
    let splits = generate_dataset(
        &cfg.profile(),
        cfg.nf,
        cfg.nn,
        cfg.counts(),
        &cfg.snr_db,
        cfg.seed,
    )?;
    let mut manifest = format!(
        "# dataset manifest\nseed {}\ngrid {}x{}\n",
        cfg.seed, cfg.nf, cfg.nn
    );
    for (name, ds) in splits.iter() {
        let bytes = ds.to_bytes();
        let path = layout.split(name);
        write_file(&path, &bytes)?;
        manifest.push_str(&format!("{name} {} {}\n", ds.len(), sha256_hex(&bytes)));
        info!("wrote {} frames to {}", ds.len(), path.display());
    }
    write_file(&layout.manifest(), &manifest)?;
    Ok(sha256_hex(manifest.as_bytes()))
}

/// Result of [`cmd_select`].
#[derive(Debug, Clone)]
pub struct Selection {
    pub pattern: PilotPattern,
    pub collisions: usize,
    pub mean_max_prob: f64,
}

fn selector_checkpoint(outcome: &SelectorOutcome, pattern: &PilotPattern) -> Checkpoint<f32> {
    let mut store = outcome.decoder.store.clone();
    store.add(SELECTOR_LOGITS, outcome.selector.log_alpha().clone());
    let mut ckpt = Checkpoint::new(store);
    outcome.decoder.net.write_meta(&mut ckpt.meta);
    ckpt.meta.insert("kind".into(), "selector".into());
    ckpt.meta.insert(
        "temperature".into(),
        outcome.selector.temperature.to_string(),
    );
    ckpt.meta.insert("pattern".into(), pattern.to_text());
    ckpt
}

/// Decoder trained jointly with the selector for `np` pilots.
pub fn load_selector_decoder(cfg: &ExperimentConfig, np: usize) -> Result<Decoder<f32>> {
    let path = Layout::new(cfg).selector(np);
    require(
        &path,
        &format!("selector checkpoint for np={np} (run select first)"),
    )?;
    let ckpt = Checkpoint::<f32>::load(&path)?;
    if ckpt.meta.get("kind").map(String::as_str) != Some("selector") {
        return Err(Error::Config(format!(
            "{} is not a selector checkpoint",
            path.display()
        )));
    }
    let net = DecoderNet::from_meta(&ckpt.meta, &ckpt.params)?;
    Decoder::extract(&net, &ckpt.params)
}

pub fn load_pattern(cfg: &ExperimentConfig, np: usize) -> Result<PilotPattern> {
    let path = Layout::new(cfg).pattern(np);
    require(
        &path,
        &format!("learned pattern for np={np} (run select first)"),
    )?;
    let pattern = PilotPattern::load(&path)?;
    if pattern.k() != np || pattern.nf() != cfg.nf || pattern.nn() != cfg.nn {
        return Err(Error::Pattern(format!(
            "{} does not describe {np} pilots on the configured grid",
            path.display()
        )));
    }
    Ok(pattern)
}

/// Trains the selector for `np` pilots and writes the pattern, its rendering and the checkpoint.
pub fn cmd_select(cfg: &ExperimentConfig, np: usize) -> Result<Selection> {
    cfg.validate()?;
    cfg.check_np(np)?;
    let train = load_split(cfg, "train")?;
    let outcome = train_selector(
        &train,
        np,
        &cfg.schedule()?,
        &cfg.decoder_spec(),
        &cfg.selector_train(),
        seed::derive(cfg.seed, &[0x5E1EC7, np as u64]),
    )?;
    let (pattern, collisions) = extract_pattern(&outcome.selector, cfg.nf, cfg.nn)?;
    let mmp = outcome.selector.mean_max_probability();
    info!("selector np={np}: final mean max-probability {mmp:.4}, {collisions} argmax collisions");
    if collisions > 0 {
        warn!("{collisions} selector nodes shared an argmax and were moved to their next-best location");
    }
    let layout = Layout::new(cfg);
    let dir = layout.select_dir(np);
    create_dir(&dir)?;
    pattern.save(&layout.pattern(np))?;
    write_file(&dir.join("pattern.ascii"), pattern.render_ascii())?;
    write_file(&dir.join("history.csv"), history_csv(&outcome.history))?;
    selector_checkpoint(&outcome, &pattern).save(&layout.selector(np))?;
    Ok(Selection {
        pattern,
        collisions,
        mean_max_prob: mmp,
    })
}

/// Trains one cascade and writes its checkpoint; returns the checkpoint path.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    source: PatternSource,
    window: SnrWindow,
    np: usize,
) -> Result<PathBuf> {
    cfg.validate()?;
    cfg.check_np(np)?;
    let layout = Layout::new(cfg);
    let train = window.apply(&load_split(cfg, "train")?, cfg.window_split_db)?;
    info!(
        "training {source}-{window} np={np} on {} frames",
        train.len()
    );
    let seed = seed::derive(cfg.seed, &[0x7EA1, source as u64, window as u64, np as u64]);
    let (pattern, decoder) = match source {
        PatternSource::Cae => (load_pattern(cfg, np)?, load_selector_decoder(cfg, np)?),
        PatternSource::Uniform => {
            let pattern = equally_spaced_pattern(cfg.nf, cfg.nn, np)?;
            let (decoder, _) = train_decoder(
                &train,
                &pattern,
                &cfg.decoder_spec(),
                &cfg.decoder_train(),
                seed,
            )?;
            (pattern, decoder)
        }
    };
    let (pipeline, history) = train_end_to_end(
        &train,
        &pattern,
        &decoder,
        &cfg.pipeline_spec(),
        &cfg.e2e_train(),
        seed,
    )?;
    let dir = layout.train_dir(source, window, np);
    create_dir(&dir)?;
    write_file(&dir.join("history.csv"), history_csv(&history))?;
    let path = layout.pipeline(source, window, np);
    pipeline.save(&path)?;
    Ok(path)
}

pub fn load_pipeline(
    cfg: &ExperimentConfig,
    source: PatternSource,
    window: SnrWindow,
    np: usize,
) -> Result<EstimatorPipeline<f32>> {
    let path = Layout::new(cfg).pipeline(source, window, np);
    require(
        &path,
        &format!("{source}-{window} pipeline checkpoint for np={np} (run train first)"),
    )?;
    EstimatorPipeline::load(&path)
}

/// Test frame `index` re-noised at `snr_db`, identical for every method.
pub fn eval_frame(
    ideal: &ComplexGrid<f32>,
    index: usize,
    snr_db: f64,
    seed: u64,
) -> Result<ComplexGrid<f64>> {
    add_awgn(
        &ideal.cast(),
        snr_db,
        seed::derive(seed, &[0xE7A1, index as u64, snr_db.to_bits()]),
    )
}

type Sums = Vec<[f64; 2]>;

/// Sums per output of `f` over the test split, chunked in parallel and reduced in chunk order.
fn sweep<F>(test: &ChannelDataset, outputs: usize, f: F) -> Result<Sums>
where
    F: Fn(&[usize]) -> Result<Sums> + Sync,
{
    let idx: Vec<usize> = (0..test.len()).collect();
    let parts = idx
        .par_chunks(EVAL_CHUNK)
        .map(&f)
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![[0.0; 2]; outputs];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            t[0] += p[0];
            t[1] += p[1];
        }
    }
    Ok(total)
}

/// Mean `(raw, normalized)` MSE of the decoder stage and the full cascade at `snr_db`.
pub fn evaluate_pipeline(
    pipe: &EstimatorPipeline<f32>,
    test: &ChannelDataset,
    snr_db: f64,
    seed: u64,
) -> Result<[(f64, f64); 2]> {
    let (nf, nn) = (pipe.nf(), pipe.nn());
    let sums = sweep(test, 2, |chunk| {
        let mut pilots = Vec::with_capacity(chunk.len() * 2 * pipe.pattern.k());
        for &i in chunk {
            let noisy = eval_frame(&test.records[i].ideal, i, snr_db, seed)?.cast::<f32>();
            pilots.extend(gathered_input(&noisy, &pipe.pattern)?);
        }
        let (lr, out) = pipe.run_batch(pilots, chunk.len())?;
        let mut sums = vec![[0.0; 2]; 2];
        let plane = 2 * nf * nn;
        for (j, &i) in chunk.iter().enumerate() {
            let ideal = &test.records[i].ideal;
            for (s, planes) in sums.iter_mut().zip([&lr, &out]) {
                let est = ComplexGrid::from_planes(nf, nn, &planes[j * plane..(j + 1) * plane])?;
                let (raw, norm) = mse(&est, ideal)?;
                s[0] += raw;
                s[1] += norm;
            }
        }
        Ok(sums)
    })?;
    let n = test.len() as f64;
    Ok([
        (sums[0][0] / n, sums[0][1] / n),
        (sums[1][0] / n, sums[1][1] / n),
    ])
}

/// Mean `(raw, normalized)` MSE of LMMSE with the true per-frame noise variance.
pub fn evaluate_mmse(
    stats: &ChannelStatistics,
    test: &ChannelDataset,
    snr_db: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let sums = sweep(test, 1, |chunk| {
        let mut s = [0.0; 2];
        for &i in chunk {
            let ideal = test.records[i].ideal.cast::<f64>();
            let noisy = eval_frame(&test.records[i].ideal, i, snr_db, seed)?;
            let obs = PilotObservation::from_grid(&noisy, &stats.pattern)?;
            let est = mmse_estimate(&obs, stats, noise_variance(ideal.mean_power(), snr_db))?;
            let (raw, norm) = mse(&est, &ideal)?;
            s[0] += raw;
            s[1] += norm;
        }
        Ok(vec![s])
    })?;
    let n = test.len() as f64;
    Ok((sums[0][0] / n, sums[0][1] / n))
}

/// LMMSE statistics for `pattern` from the training split, cached under the eval directory.
fn statistics(
    cfg: &ExperimentConfig,
    train: &ChannelDataset,
    pattern: &PilotPattern,
) -> Result<ChannelStatistics> {
    let path = Layout::new(cfg).statistics(pattern.k());
    if path.is_file() {
        if let Ok(stats) = ChannelStatistics::load(&path) {
            if &stats.pattern == pattern
                && stats.dataset_seed == train.header.seed
                && stats.samples == train.len()
            {
                return Ok(stats);
            }
        }
    }
    let stats = fit_statistics(train, pattern)?;
    stats.save(&path)?;
    Ok(stats)
}

/// Uniform-pattern ChannelNet method name for a training window.
pub fn uniform_method(window: SnrWindow) -> String {
    format!("uniform-{window}")
}

/// Evaluates every method over the SNR sweep and the pilot-count sweep, writing the report CSV.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let test = load_split(cfg, "test")?;
    let train = load_split(cfg, "train")?;

    let mut jobs: Vec<(usize, Vec<f64>, bool)> = Vec::new();
    for &np in &cfg.np_list {
        let full = cfg.snr_sweep_np.contains(&np);
        let snrs = if full {
            cfg.snr_db.clone()
        } else {
            vec![cfg.np_sweep_snr_db]
        };
        jobs.push((np, snrs, full));
    }
    for (np, _, full) in &jobs {
        require(
            &layout.pattern(*np),
            &format!("learned pattern for np={np}"),
        )?;
        let mut needed = vec![
            (PatternSource::Cae, SnrWindow::Full),
            (PatternSource::Uniform, SnrWindow::Full),
        ];
        if *full {
            needed.extend([
                (PatternSource::Uniform, SnrWindow::Low),
                (PatternSource::Uniform, SnrWindow::High),
            ]);
        }
        for (source, window) in needed {
            require(
                &layout.pipeline(source, window, *np),
                &format!("{source}-{window} pipeline checkpoint for np={np}"),
            )?;
        }
    }
    create_dir(&layout.eval_dir())?;

    let mut rows = Vec::new();
    for (np, mut snrs, full) in jobs {
        if full && !snrs.contains(&cfg.np_sweep_snr_db) {
            snrs.push(cfg.np_sweep_snr_db);
        }
        let pattern = load_pattern(cfg, np)?;
        let stats = statistics(cfg, &train, &pattern)?;
        let cae = load_pipeline(cfg, PatternSource::Cae, SnrWindow::Full, np)?;
        let mut uniform = vec![(
            SnrWindow::Full,
            load_pipeline(cfg, PatternSource::Uniform, SnrWindow::Full, np)?,
        )];
        if full {
            for w in [SnrWindow::Low, SnrWindow::High] {
                uniform.push((w, load_pipeline(cfg, PatternSource::Uniform, w, np)?));
            }
        }
        for &snr in &snrs {
            let mut push = |method: String, (raw, norm): (f64, f64)| {
                rows.push(ReportRow {
                    method,
                    np,
                    snr_db: snr,
                    mse_raw: raw,
                    mse_norm: norm,
                    frames: test.len(),
                })
            };
            let [dec, casc] = evaluate_pipeline(&cae, &test, snr, cfg.seed)?;
            push(METHOD_CAE.into(), casc);
            push(METHOD_LS_DECODER.into(), dec);
            for (w, pipe) in &uniform {
                push(
                    uniform_method(*w),
                    evaluate_pipeline(pipe, &test, snr, cfg.seed)?[1],
                );
            }
            push(
                METHOD_MMSE.into(),
                evaluate_mmse(&stats, &test, snr, cfg.seed)?,
            );
            info!("evaluated np={np} at {snr} dB");
        }
    }
    for r in &rows {
        r.validate()?;
    }
    write_csv(&rows, &layout.report_csv())?;
    Ok(rows)
}

/// Every split file and pattern written so far, for reproducibility checks.
pub fn artifact_paths(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let layout = Layout::new(cfg);
    let mut paths: Vec<PathBuf> = SPLIT_NAMES.iter().map(|n| layout.split(n)).collect();
    paths.push(layout.manifest());
    for &np in &cfg.np_list {
        paths.push(layout.pattern(np));
        paths.push(layout.selector(np));
        for source in [PatternSource::Cae, PatternSource::Uniform] {
            for window in [SnrWindow::Full, SnrWindow::Low, SnrWindow::High] {
                paths.push(layout.pipeline(source, window, np));
            }
        }
    }
    paths.retain(|p| p.is_file());
    paths
}
