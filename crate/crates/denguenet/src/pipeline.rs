//! Stage orchestration: extract, correlate, clean, featurize, train,
//! evaluate, ablate, plotdata. Every stage is a pure function of the
//! config hash and its upstream artifacts, so reruns produce byte-identical
//! outputs; a manifest in the output root refuses mixed-config caches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{correlation_matrix, select_bands, BandSelection, CorrelationMatrix};
use crate::config::RunConfig;
use crate::csr::{
    build_average_bank, classify_tiles, crop_to_tile_multiple, detect_ccs, fit_thresholds,
    swap_tiles, CcsThresholds,
};
use crate::epiweek::EpiWeek;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_grid, chrono_split, evaluate_repeated, mean_std, split_labels, AblationCell,
    AblationTable, ExtractorSet, MeanStd, MetricsRow, SeedMetrics,
};
use crate::features::{embed_rgb, extract_texture, RadiomicsVector, TEXTURE_FEATURE_NAMES};
use crate::forecaster::{
    build_windows, make_variant, predict, train, BranchKind, FeatureSeries, ModelConfig,
    PredictionPoint, PredictionSeries, Split, WeekFeatures,
};
use crate::ingestion::{
    fetch_scene, load_cases,
    store::{load_float_bands, save_float_bands},
    SceneStore,
};
use crate::raster::Raster;

pub struct Pipeline {
    cfg: RunConfig,
    config_dir: PathBuf,
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SelectionArtifact {
    labels: Vec<String>,
    selection: BandSelection,
}

impl SelectionArtifact {
    fn band_name(&self, position1: usize) -> &str {
        &self.labels[position1 - 1]
    }

    /// Selected positions in cleaned-file order: texture, R, G, B.
    fn positions(&self) -> [usize; 4] {
        let (r, g, b) = self.selection.embedding_bands;
        [self.selection.texture_band, r, g, b]
    }
}

impl Pipeline {
    pub fn new(cfg: RunConfig, config_dir: PathBuf) -> Self {
        let out = cfg.resolve(&config_dir, &cfg.run.output_root);
        Pipeline { cfg, config_dir, out }
    }

    pub fn output_root(&self) -> &Path {
        &self.out
    }

    fn ensure_manifest(&self, force: bool) -> Result<()> {
        let path = self.out.join("manifest.json");
        let hash = self.cfg.hash();
        if path.is_file() {
            let existing: Manifest = serde_json::from_slice(
                &std::fs::read(&path).map_err(|e| Error::io("read manifest".to_string(), e))?,
            )?;
            if existing.config_hash != hash {
                if !force {
                    return Err(Error::ConfigHashMismatch {
                        expected: hash,
                        found: existing.config_hash,
                    });
                }
            } else {
                return Ok(());
            }
        }
        std::fs::create_dir_all(&self.out)
            .map_err(|e| Error::io(format!("create {}", self.out.display()), e))?;
        let manifest = Manifest { config_hash: hash };
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io("write manifest".to_string(), e))?;
        Ok(())
    }

    fn regions(&self, filter: Option<&str>) -> Result<Vec<String>> {
        let all = self.cfg.region_names();
        match filter {
            None => Ok(all),
            Some(name) => {
                if all.iter().any(|r| r == name) {
                    Ok(vec![name.to_string()])
                } else {
                    Err(Error::InvalidRegion {
                        name: name.to_string(),
                        reason: format!("not in configured set {all:?}"),
                    })
                }
            }
        }
    }

    fn scene_store(&self) -> SceneStore {
        SceneStore::new(self.out.join("scenes"))
    }

    fn cases_path(&self) -> PathBuf {
        self.cfg.resolve(&self.config_dir, &self.cfg.data.cases_file)
    }

    fn write(&self, rel: impl AsRef<Path>, content: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(rel.as_ref());
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
        std::fs::write(&path, content)
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        Ok(path)
    }

    /// Report artifacts carry the config hash as a leading comment line.
    fn write_report(&self, rel: impl AsRef<Path>, content: &str) -> Result<PathBuf> {
        self.write(rel, format!("# config={}\n{content}", self.cfg.hash()))
    }

    /// Longest contiguous run of weeks that have both a stored scene and a
    /// case record, with the matched case counts.
    fn aligned_weeks(&self, region: &str) -> Result<Vec<(EpiWeek, u32)>> {
        let store = self.scene_store();
        let scene_weeks = store.list_weeks(region)?;
        if scene_weeks.is_empty() {
            return Err(Error::MissingArtifact {
                stage: "downstream".to_string(),
                run_first: "extract".to_string(),
            });
        }
        let cases = load_cases(&self.cases_path())?;
        let case_map: BTreeMap<EpiWeek, u32> = cases
            .iter()
            .filter(|c| c.region == region)
            .map(|c| (c.epiweek, c.cases))
            .collect();
        let both: Vec<EpiWeek> =
            scene_weeks.into_iter().filter(|w| case_map.contains_key(w)).collect();
        if both.is_empty() {
            return Err(Error::EmptyOverlap(region.to_string()));
        }
        let run = longest_consecutive_run(&both);
        Ok(run.into_iter().map(|w| (w, case_map[&w])).collect())
    }

    /// Loads one scene resampled to the target resolution.
    fn load_uniform_scene(
        &self,
        region: &str,
        week: EpiWeek,
    ) -> Result<crate::ingestion::SatelliteScene> {
        let scene = self.scene_store().load(region, week, &self.cfg.bands.specs())?;
        crate::ingestion::resample_to_uniform(&scene, self.cfg.data.target_mpp)
    }

    // ----- extract ---------------------------------------------------

    pub fn extract(&self, region_filter: Option<&str>, force: bool) -> Result<()> {
        self.ensure_manifest(force)?;
        // Validate the case file up front so schema errors surface here.
        load_cases(&self.cases_path())?;
        let provider = self.cfg.build_provider(&self.config_dir)?;
        let store = self.scene_store();
        for name in self.regions(region_filter)? {
            let region = self
                .cfg
                .regions
                .iter()
                .find(|r| r.name == name)
                .expect("region validated")
                .to_region();
            let mut fetched = 0usize;
            let mut missing = Vec::new();
            for week in self.cfg.weeks() {
                match fetch_scene(&region, week, provider.as_ref(), &store) {
                    Ok(_) => fetched += 1,
                    Err(Error::MissingScene { week, .. }) => missing.push(week),
                    Err(e) => return Err(e),
                }
            }
            println!(
                "extract: {name}: {fetched} scenes fetched, {} weeks without acquisition",
                missing.len()
            );
            for week in missing {
                println!("extract: {name}: no scene for {week}");
            }
        }
        Ok(())
    }

    // ----- correlate -------------------------------------------------

    pub fn correlate(&self, force: bool) -> Result<(CorrelationMatrix, BandSelection)> {
        self.ensure_manifest(force)?;
        if !self.out.join("scenes").is_dir() {
            return Err(Error::MissingArtifact {
                stage: "correlate".to_string(),
                run_first: "extract".to_string(),
            });
        }
        let mut training_scenes = Vec::new();
        for region in self.regions(None)? {
            let weeks = self.aligned_weeks(&region)?;
            let (train_end, _) = self.cfg.split.boundaries(weeks.len())?;
            for (week, _) in &weeks[..train_end] {
                training_scenes.push(self.load_uniform_scene(&region, *week)?);
            }
        }
        let corr = correlation_matrix(&training_scenes)?;
        drop(training_scenes);
        let policy = self.cfg.selection.to_policy(&self.cfg.bands.swir)?;
        let selection = select_bands(&corr, &policy)?;

        // Matrix CSV: header row of labels, one row per band.
        let mut matrix_csv = String::from("band");
        for l in &corr.labels {
            write!(matrix_csv, ",{l}").expect("string write");
        }
        matrix_csv.push('\n');
        for (a, l) in corr.labels.iter().enumerate() {
            write!(matrix_csv, "{l}").expect("string write");
            for b in 0..corr.n_bands() {
                write!(matrix_csv, ",{}", corr.values[a][b]).expect("string write");
            }
            matrix_csv.push('\n');
        }
        self.write_report("reports/band-correlation.csv", &matrix_csv)?;

        // Long-form heat map data for plotting.
        let mut heat = String::from("band_a,band_b,rho,p_max,excluded_scenes\n");
        for a in 0..corr.n_bands() {
            for b in 0..corr.n_bands() {
                writeln!(
                    heat,
                    "{},{},{},{},{}",
                    corr.labels[a], corr.labels[b], corr.values[a][b], corr.p_values[a][b],
                    corr.excluded[a][b]
                )
                .expect("string write");
            }
        }
        self.write_report("reports/band-correlation-heatmap.csv", &heat)?;

        let artifact = SelectionArtifact { labels: corr.labels.clone(), selection };
        self.write("artifacts/band-selection.json", serde_json::to_vec_pretty(&artifact)?)?;
        println!(
            "correlate: {} training scenes; texture band {} ({}), RGB bands {:?}",
            corr.n_scenes,
            selection.texture_band,
            artifact.band_name(selection.texture_band),
            selection.embedding_bands
        );
        Ok((corr, selection))
    }

    fn load_selection(&self, stage: &str) -> Result<SelectionArtifact> {
        let path = self.out.join("artifacts/band-selection.json");
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                stage: stage.to_string(),
                run_first: "correlate".to_string(),
            });
        }
        Ok(serde_json::from_slice(
            &std::fs::read(&path).map_err(|e| Error::io("read band selection".to_string(), e))?,
        )?)
    }

    // ----- clean -----------------------------------------------------

    pub fn clean(&self, region_filter: Option<&str>, force: bool, sweep: bool) -> Result<()> {
        self.ensure_manifest(force)?;
        let artifact = self.load_selection("clean")?;
        let positions = artifact.positions();

        for region in self.regions(region_filter)? {
            let weeks = self.aligned_weeks(&region)?;
            let (train_end, _) = self.cfg.split.boundaries(weeks.len())?;

            // Selected bands only, resampled and cropped to the tile grid.
            let mut per_band: Vec<Vec<Raster>> = vec![Vec::new(); positions.len()];
            for (week, _) in &weeks {
                let scene = self.load_uniform_scene(&region, *week)?;
                for (slot, &pos) in positions.iter().enumerate() {
                    per_band[slot].push(crop_to_tile_multiple(&scene.band(pos).raster));
                }
            }

            let mut thresholds_by_band: BTreeMap<String, CcsThresholds> = BTreeMap::new();
            let mut diag = String::from(
                "year,epiweek,band,cloud_pixels,shadow_pixels,abnormal_tiles,swapped_tiles,unswappable_tiles\n",
            );
            let mut cleaned: Vec<Vec<(String, Raster)>> = vec![Vec::new(); weeks.len()];
            let mut masks: Vec<Vec<(String, Raster)>> = vec![Vec::new(); weeks.len()];

            for (slot, &pos) in positions.iter().enumerate() {
                let band_name = artifact.band_name(pos).to_string();
                let rasters = &per_band[slot];
                let thresholds =
                    fit_thresholds(&rasters[..train_end], self.cfg.csr.p_cloud, self.cfg.csr.p_shadow)?;
                let bank = build_average_bank(&rasters[..train_end], &thresholds)?;

                for (wi, raster) in rasters.iter().enumerate() {
                    let mask = detect_ccs(raster, &thresholds);
                    let grid = classify_tiles(raster, &mask);
                    let outcome = swap_tiles(raster, &grid, &bank);
                    let (week, _) = weeks[wi];
                    writeln!(
                        diag,
                        "{},{},{},{},{},{},{},{}",
                        week.year(),
                        week.week(),
                        band_name,
                        mask.cloud_count(),
                        mask.shadow_count(),
                        grid.abnormal_count(),
                        outcome.swapped.len(),
                        outcome.unswappable.len()
                    )
                    .expect("string write");

                    // Mask overlay: 0 normal, 1 cloud, 2 shadow.
                    let (h, w) = raster.shape();
                    let mut overlay = Raster::zeros(h, w);
                    for idx in 0..h * w {
                        if mask.cloud[idx] {
                            overlay.as_mut_slice()[idx] = 1.0;
                        } else if mask.shadow[idx] {
                            overlay.as_mut_slice()[idx] = 2.0;
                        }
                    }
                    masks[wi].push((band_name.clone(), overlay));
                    cleaned[wi].push((band_name.clone(), outcome.raster));
                }
                thresholds_by_band.insert(band_name, thresholds);
            }

            for (wi, (week, _)) in weeks.iter().enumerate() {
                let path = self.out.join(format!("cleaned/{region}/{week}.tiff"));
                save_float_bands(&path, &cleaned[wi])?;
                let mask_path = self.out.join(format!("diagnostics/masks/{region}/{week}.tiff"));
                save_float_bands(&mask_path, &masks[wi])?;
            }
            self.write_report(format!("diagnostics/csr-{region}.csv"), &diag)?;
            self.write(
                format!("artifacts/csr-{region}.json"),
                serde_json::to_vec_pretty(&thresholds_by_band)?,
            )?;

            if sweep {
                self.write_threshold_sweep(&region, &per_band[0], train_end)?;
            }
            println!("clean: {region}: {} weeks cleaned across {} bands", weeks.len(), positions.len());
        }
        Ok(())
    }

    /// Reproduces the percentile search grid on the texture band: for every
    /// admissible (cloud, shadow) percentile pair, the mean fraction of
    /// abnormal tiles over the training scenes.
    fn write_threshold_sweep(
        &self,
        region: &str,
        texture_rasters: &[Raster],
        train_end: usize,
    ) -> Result<()> {
        let mut csv = String::from("p_cloud,p_shadow,mean_abnormal_fraction\n");
        for p_cloud in (10..=95).step_by(5) {
            for p_shadow in (5..p_cloud).step_by(5) {
                let Ok(thresholds) =
                    fit_thresholds(&texture_rasters[..train_end], p_cloud, p_shadow)
                else {
                    continue;
                };
                let mut fraction_sum = 0.0;
                for raster in &texture_rasters[..train_end] {
                    let grid = classify_tiles(raster, &detect_ccs(raster, &thresholds));
                    let (rows, cols) = grid.grid_shape();
                    fraction_sum += grid.abnormal_count() as f64 / (rows * cols) as f64;
                }
                writeln!(csv, "{},{},{}", p_cloud, p_shadow, fraction_sum / train_end as f64)
                    .expect("string write");
            }
        }
        self.write_report(format!("diagnostics/csr-sweep-{region}.csv"), &csv)?;
        Ok(())
    }

    // ----- featurize ---------------------------------------------------

    pub fn featurize(&self, region_filter: Option<&str>, force: bool) -> Result<()> {
        self.ensure_manifest(force)?;
        let artifact = self.load_selection("featurize")?;
        let positions = artifact.positions();
        let encoder = self.cfg.features.build_encoder(&self.config_dir)?;
        let glcm = &self.cfg.features.glcm;

        for region in self.regions(region_filter)? {
            let weeks = self.aligned_weeks(&region)?;
            let cleaned_dir = self.out.join(format!("cleaned/{region}"));
            if !cleaned_dir.is_dir() {
                return Err(Error::MissingArtifact {
                    stage: "featurize".to_string(),
                    run_first: "clean".to_string(),
                });
            }
            let names: Vec<String> =
                positions.iter().map(|&p| artifact.band_name(p).to_string()).collect();

            struct WeekOut {
                week: EpiWeek,
                texture_csr: RadiomicsVector,
                texture_raw: RadiomicsVector,
                emb_csr: Vec<f64>,
                emb_raw: Vec<f64>,
            }

            let results: Vec<Result<WeekOut>> = weeks
                .par_iter()
                .map(|&(week, _)| {
                    let cleaned =
                        load_float_bands(&cleaned_dir.join(format!("{week}.tiff")), &names)?;
                    let scene = self.load_uniform_scene(&region, week)?;
                    let raw: Vec<Raster> = positions
                        .iter()
                        .map(|&p| crop_to_tile_multiple(&scene.band(p).raster))
                        .collect();

                    let texture_csr = extract_texture(&cleaned[0].1, glcm);
                    let texture_raw = extract_texture(&raw[0], glcm);
                    let emb_csr =
                        embed_rgb(&[&cleaned[1].1, &cleaned[2].1, &cleaned[3].1], encoder.as_ref())?;
                    let emb_raw = embed_rgb(&[&raw[1], &raw[2], &raw[3]], encoder.as_ref())?;
                    Ok(WeekOut { week, texture_csr, texture_raw, emb_csr, emb_raw })
                })
                .collect();

            let mut csv = String::from("year,epiweek,csr");
            for name in TEXTURE_FEATURE_NAMES {
                write!(csv, ",{name}").expect("string write");
            }
            csv.push_str(",zero_variance,single_gray_level\n");
            let mut emb_csr_bytes: Vec<u8> = Vec::new();
            let mut emb_raw_bytes: Vec<u8> = Vec::new();
            let mut week_list = Vec::with_capacity(weeks.len());

            for r in results {
                let out = r?;
                for (csr_flag, tex) in [(1, &out.texture_csr), (0, &out.texture_raw)] {
                    write!(csv, "{},{},{csr_flag}", out.week.year(), out.week.week())
                        .expect("string write");
                    for v in tex.values() {
                        write!(csv, ",{v}").expect("string write");
                    }
                    writeln!(
                        csv,
                        ",{},{}",
                        u8::from(tex.flags.zero_variance),
                        u8::from(tex.flags.single_gray_level)
                    )
                    .expect("string write");
                }
                for v in &out.emb_csr {
                    emb_csr_bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                for v in &out.emb_raw {
                    emb_raw_bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                week_list.push(out.week);
            }

            self.write(format!("features/{region}.csv"), &csv)?;
            self.write(format!("features/{region}-csr.emb.bin"), &emb_csr_bytes)?;
            self.write(format!("features/{region}-nocsr.emb.bin"), &emb_raw_bytes)?;
            #[derive(Serialize)]
            struct EmbManifest<'a> {
                encoder: String,
                dim: usize,
                weeks: &'a [EpiWeek],
                csr_file: String,
                nocsr_file: String,
            }
            self.write(
                format!("features/{region}.emb.json"),
                serde_json::to_vec_pretty(&EmbManifest {
                    encoder: encoder.identity(),
                    dim: encoder.dim(),
                    weeks: &week_list,
                    csr_file: format!("{region}-csr.emb.bin"),
                    nocsr_file: format!("{region}-nocsr.emb.bin"),
                })?,
            )?;
            println!(
                "featurize: {region}: {} weeks, embedding dim {}",
                week_list.len(),
                encoder.dim()
            );
        }
        Ok(())
    }

    /// Reassembles the cached features and case counts into a feature
    /// series for one region.
    pub fn load_feature_series(&self, region: &str, csr: bool) -> Result<FeatureSeries> {
        let csv_path = self.out.join(format!("features/{region}.csv"));
        let manifest_path = self.out.join(format!("features/{region}.emb.json"));
        if !csv_path.is_file() || !manifest_path.is_file() {
            return Err(Error::MissingArtifact {
                stage: "train".to_string(),
                run_first: "featurize".to_string(),
            });
        }
        #[derive(Deserialize)]
        struct EmbManifest {
            dim: usize,
            weeks: Vec<EpiWeek>,
            csr_file: String,
            nocsr_file: String,
        }
        let manifest: EmbManifest = serde_json::from_slice(
            &std::fs::read(&manifest_path)
                .map_err(|e| Error::io("read embedding manifest".to_string(), e))?,
        )?;
        let emb_file = if csr { &manifest.csr_file } else { &manifest.nocsr_file };
        let bytes = std::fs::read(self.out.join("features").join(emb_file))
            .map_err(|e| Error::io(format!("read {emb_file}"), e))?;
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if floats.len() != manifest.weeks.len() * manifest.dim {
            return Err(Error::InvalidConfig(format!(
                "embedding cache {emb_file} has {} values, expected {}",
                floats.len(),
                manifest.weeks.len() * manifest.dim
            )));
        }

        let mut texture_by_week: BTreeMap<EpiWeek, Vec<f64>> = BTreeMap::new();
        let mut reader = csv::Reader::from_path(&csv_path)?;
        for record in reader.records() {
            let record = record?;
            let year: i32 = record[0].parse().map_err(|_| {
                Error::InvalidConfig(format!("bad year in feature cache: {}", &record[0]))
            })?;
            let week: u32 = record[1].parse().map_err(|_| {
                Error::InvalidConfig(format!("bad week in feature cache: {}", &record[1]))
            })?;
            let row_csr = &record[2] == "1";
            if row_csr != csr {
                continue;
            }
            let values: Vec<f64> = (3..12)
                .map(|i| record[i].parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidConfig("bad feature value in cache".to_string()))?;
            texture_by_week.insert(EpiWeek::new(year, week)?, values);
        }

        let cases = load_cases(&self.cases_path())?;
        let case_map: BTreeMap<EpiWeek, u32> = cases
            .iter()
            .filter(|c| c.region == region)
            .map(|c| (c.epiweek, c.cases))
            .collect();

        let mut weeks = Vec::with_capacity(manifest.weeks.len());
        for (i, &week) in manifest.weeks.iter().enumerate() {
            let texture = texture_by_week.remove(&week).ok_or_else(|| {
                Error::InvalidConfig(format!("feature cache missing texture row for {week}"))
            })?;
            let cases = *case_map.get(&week).ok_or_else(|| {
                Error::InvalidConfig(format!("case series missing {week} for {region}"))
            })?;
            weeks.push(WeekFeatures {
                epiweek: week,
                texture,
                embedding: floats[i * manifest.dim..(i + 1) * manifest.dim].to_vec(),
                cases,
            });
        }
        Ok(FeatureSeries { region: region.to_string(), weeks })
    }

    // ----- train -------------------------------------------------------

    fn model_dir(&self, region: &str, variant: &str, seed: u64) -> PathBuf {
        self.out.join(format!("models/{region}-{variant}-{seed}"))
    }

    fn predictions_path(&self, region: &str, variant: &str, seed: u64) -> PathBuf {
        self.out.join(format!("predictions/{region}-{variant}-{seed}.csv"))
    }

    pub fn train_stage(&self, region_filter: Option<&str>, force: bool) -> Result<()> {
        self.ensure_manifest(force)?;
        for region in self.regions(region_filter)? {
            let series = self.load_feature_series(&region, true)?;
            let windows = build_windows(&series, self.cfg.model.window)?;
            let labels = split_labels(windows.len(), &self.cfg.split)?;
            let (train_w, val_w, _) = chrono_split(&windows, &self.cfg.split)?;

            for &variant in &self.cfg.run.variants {
                for &seed in &self.cfg.run.seeds {
                    let mc = make_variant(&self.cfg.model.to_model_config(seed), variant);
                    let model = train(train_w, val_w, &mc)?;
                    model.save(&self.model_dir(&region, &variant.to_string(), seed))?;
                    let series =
                        predict(&model, &region, &variant.to_string(), &windows, &labels)?;
                    self.write(
                        format!("predictions/{region}-{variant}-{seed}.csv"),
                        prediction_csv(&series),
                    )?;
                    println!(
                        "train: {region}/{variant}/seed {seed}: best epoch {} of {}, val loss {:.6}",
                        model.history.best_epoch + 1,
                        mc.epochs,
                        model.history.val_loss[model.history.best_epoch]
                    );
                }
            }
        }
        Ok(())
    }

    fn load_prediction_series(&self, region: &str, variant: &str, seed: u64) -> Result<PredictionSeries> {
        let path = self.predictions_path(region, variant, seed);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                stage: "evaluate".to_string(),
                run_first: "train".to_string(),
            });
        }
        parse_prediction_csv(&path, region, variant)
    }

    // ----- evaluate ------------------------------------------------------

    pub fn evaluate(&self, force: bool) -> Result<Vec<MetricsRow>> {
        self.ensure_manifest(force)?;
        // Nothing trained at all is a stage-order error; a partially failed
        // seed run is an incomplete row instead.
        let any_predictions = self.regions(None)?.iter().any(|region| {
            self.cfg.run.variants.iter().any(|v| {
                self.cfg
                    .run
                    .seeds
                    .iter()
                    .any(|&s| self.predictions_path(region, &v.to_string(), s).is_file())
            })
        });
        if !any_predictions {
            return Err(Error::MissingArtifact {
                stage: "evaluate".to_string(),
                run_first: "train".to_string(),
            });
        }
        let mut rows = Vec::new();
        for region in self.regions(None)? {
            for &variant in &self.cfg.run.variants {
                let row = evaluate_repeated(
                    &region,
                    &variant.to_string(),
                    &self.cfg.run.seeds,
                    |seed| {
                        let series =
                            self.load_prediction_series(&region, &variant.to_string(), seed)?;
                        SeedMetrics::from_series(seed, &series)
                    },
                );
                rows.push(row);
            }
        }

        let mut csv = String::from(
            "region,variant,mae_mean,mae_std,smape_mean,smape_std,rmse_mean,rmse_std,n_test,complete\n",
        );
        for r in &rows {
            let cell = |m: &Option<MeanStd>| -> String {
                match m {
                    Some(v) => format!("{},{}", v.mean, v.std),
                    None => ",".to_string(),
                }
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.region,
                r.variant,
                cell(&r.mae),
                cell(&r.smape),
                cell(&r.rmse),
                r.n_test,
                r.complete
            )
            .expect("string write");
        }
        self.write_report("reports/metrics.csv", &csv)?;
        self.write_report("reports/metrics.txt", &render_metrics_tables(&rows, &self.cfg.region_names()))?;
        println!("evaluate: {} rows -> reports/metrics.csv", rows.len());
        Ok(rows)
    }

    // ----- ablate --------------------------------------------------------

    pub fn ablate(&self, force: bool) -> Result<AblationTable> {
        self.ensure_manifest(force)?;
        let regions = self.region_names_checked()?;
        let table = ablation_grid(&regions, |region, set, csr| {
            let series = self.load_feature_series(region, csr)?;
            let windows = build_windows(&series, self.cfg.model.window)?;
            let (train_w, val_w, test_w) = chrono_split(&windows, &self.cfg.split)?;
            let branches = match set {
                ExtractorSet::Vit => vec![BranchKind::Embedding],
                ExtractorSet::FEng => vec![BranchKind::Texture],
                ExtractorSet::Both => vec![BranchKind::Texture, BranchKind::Embedding],
            };
            let mut maes = Vec::new();
            let mut smapes = Vec::new();
            let mut rmses = Vec::new();
            for &seed in &self.cfg.run.seeds {
                let mc = ModelConfig {
                    branches: branches.clone(),
                    ..self.cfg.model.to_model_config(seed)
                };
                let model = train(train_w, val_w, &mc)?;
                let preds = model.predict_values(test_w)?;
                let y: Vec<f64> = test_w.iter().map(|s| s.target).collect();
                maes.push(crate::eval::mae(&y, &preds)?);
                smapes.push(crate::eval::smape(&y, &preds)?);
                rmses.push(crate::eval::rmse(&y, &preds)?);
            }
            Ok(AblationCell {
                mae: mean_std(&maes),
                smape: mean_std(&smapes),
                rmse: mean_std(&rmses),
            })
        });

        let mut csv = String::from("extractors,csr");
        for r in &regions {
            write!(csv, ",{r}_mae_mean,{r}_mae_std").expect("string write");
        }
        csv.push('\n');
        for row in &table.rows {
            write!(csv, "{},{}", row.extractors, u8::from(row.csr)).expect("string write");
            for cell in &row.cells {
                match cell {
                    Some(c) => write!(csv, ",{},{}", c.mae.mean, c.mae.std).expect("string write"),
                    None => csv.push_str(",,"),
                }
            }
            csv.push('\n');
        }
        self.write_report("reports/ablation-mae.csv", &csv)?;
        self.write_report("reports/ablation-mae.txt", &render_ablation_table(&table))?;

        let avg = table.averaged_with_csr();
        let mut cmp = String::from("extractors,mae,smape,rmse\n");
        for (set, mae, smape, rmse) in &avg {
            writeln!(cmp, "{set},{mae},{smape},{rmse}").expect("string write");
        }
        self.write_report("reports/extractor-comparison.csv", &cmp)?;
        self.write_report("reports/extractor-comparison.txt", &render_comparison_table(&avg))?;
        println!("ablate: 6 configurations x {} regions -> reports/ablation-mae.csv", regions.len());
        Ok(table)
    }

    fn region_names_checked(&self) -> Result<Vec<String>> {
        let regions = self.cfg.region_names();
        for r in &regions {
            if !self.out.join(format!("features/{r}.csv")).is_file() {
                return Err(Error::MissingArtifact {
                    stage: "ablate".to_string(),
                    run_first: "featurize".to_string(),
                });
            }
        }
        Ok(regions)
    }

    // ----- plotdata --------------------------------------------------------

    pub fn plotdata(&self, region_filter: Option<&str>, force: bool) -> Result<()> {
        self.ensure_manifest(force)?;
        let first_seed = *self.cfg.run.seeds.first().expect("validated non-empty");
        for region in self.regions(region_filter)? {
            let mut series = Vec::new();
            for &variant in &self.cfg.run.variants {
                series.push(self.load_prediction_series(
                    &region,
                    &variant.to_string(),
                    first_seed,
                )?);
            }
            let refs: Vec<&PredictionSeries> = series.iter().collect();
            let csv = crate::eval::emit_plot_data(&refs)?;
            self.write_report(format!("plots/{region}.csv"), &csv)?;
            println!("plotdata: {region}: {} variants -> plots/{region}.csv", series.len());
        }
        Ok(())
    }

    // ----- synth -----------------------------------------------------------

    pub fn synth(&self) -> Result<()> {
        let dir = self.cfg.resolve(&self.config_dir, &self.cfg.data.fixture_dir);
        let report = crate::synth::generate_fixture(
            &dir,
            &self.cfg.region_names(),
            &self.cfg.bands.specs(),
            self.cfg.data.start,
            self.cfg.data.end,
            &self.cfg.synth,
        )?;
        println!(
            "synth: {} scenes over {} weeks x {} regions -> {}",
            report.scenes,
            report.weeks,
            report.regions,
            dir.display()
        );
        Ok(())
    }

    // ----- all -------------------------------------------------------------

    pub fn run_all(&self, force: bool) -> Result<()> {
        self.extract(None, force)?;
        self.correlate(force)?;
        self.clean(None, force, false)?;
        self.featurize(None, force)?;
        self.train_stage(None, force)?;
        self.evaluate(force)?;
        self.ablate(force)?;
        self.plotdata(None, force)?;
        Ok(())
    }
}

/// Longest run of consecutive epi weeks; earliest wins ties.
pub(crate) fn longest_consecutive_run(sorted_weeks: &[EpiWeek]) -> Vec<EpiWeek> {
    let mut best: (usize, usize) = (0, 0);
    let mut run_start = 0usize;
    for i in 1..=sorted_weeks.len() {
        let broken = i == sorted_weeks.len() || sorted_weeks[i - 1].succ() != sorted_weeks[i];
        if broken {
            let len = i - run_start;
            if len > best.1 {
                best = (run_start, len);
            }
            run_start = i;
        }
    }
    sorted_weeks[best.0..best.0 + best.1].to_vec()
}

fn prediction_csv(series: &PredictionSeries) -> String {
    let mut out = String::from("epiweek,split,y_true,y_hat\n");
    for p in &series.points {
        writeln!(out, "{},{},{},{}", p.epiweek, p.split, p.y_true, p.y_hat)
            .expect("string write");
    }
    out
}

fn parse_prediction_csv(path: &Path, region: &str, variant: &str) -> Result<PredictionSeries> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let epiweek: EpiWeek = record[0].parse()?;
        let split = match &record[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => {
                return Err(Error::InvalidConfig(format!("bad split label `{other}` in {}", path.display())))
            }
        };
        let y_true: f64 = record[2]
            .parse()
            .map_err(|_| Error::InvalidConfig("bad y_true in predictions".to_string()))?;
        let y_hat: f64 = record[3]
            .parse()
            .map_err(|_| Error::InvalidConfig("bad y_hat in predictions".to_string()))?;
        points.push(PredictionPoint { epiweek, split, y_true, y_hat });
    }
    Ok(PredictionSeries { region: region.to_string(), variant: variant.to_string(), points })
}

fn fmt_cell(m: &Option<MeanStd>) -> String {
    match m {
        Some(v) => v.to_string(),
        None => "unavailable".to_string(),
    }
}

/// Aligned-text tables in the published layout: one block per variant,
/// metrics as rows, regions as columns, plus the across-region average.
fn render_metrics_tables(rows: &[MetricsRow], regions: &[String]) -> String {
    let mut out = String::new();
    let variants: Vec<String> = {
        let mut v: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
        v.dedup();
        v
    };
    for variant in variants {
        writeln!(out, "== {variant} ==").expect("string write");
        let width = 16usize;
        write!(out, "{:10}", "Metrics").expect("string write");
        for r in regions {
            write!(out, "{r:>width$}").expect("string write");
        }
        writeln!(out, "{:>width$}", "Average").expect("string write");

        for (metric, get) in [
            ("MAE", (|r: &MetricsRow| r.mae) as fn(&MetricsRow) -> Option<MeanStd>),
            ("sMAPE", |r: &MetricsRow| r.smape),
            ("RMSE", |r: &MetricsRow| r.rmse),
        ] {
            write!(out, "{metric:10}").expect("string write");
            let mut means = Vec::new();
            for region in regions {
                let cell = rows
                    .iter()
                    .find(|r| &r.region == region && r.variant == variant)
                    .and_then(get);
                if let Some(v) = cell {
                    means.push(v.mean);
                }
                write!(out, "{:>width$}", fmt_cell(&cell)).expect("string write");
            }
            let avg = if means.is_empty() { None } else { Some(mean_std(&means)) };
            writeln!(out, "{:>width$}", fmt_cell(&avg)).expect("string write");
        }
        out.push('\n');
    }
    out
}

fn render_ablation_table(table: &AblationTable) -> String {
    let mut out = String::new();
    let width = 16usize;
    write!(out, "{:12}{:4}", "Extractors", "CSR").expect("string write");
    for r in &table.regions {
        write!(out, "{r:>width$}").expect("string write");
    }
    out.push('\n');
    for row in &table.rows {
        write!(out, "{:12}{:4}", row.extractors.to_string(), if row.csr { "yes" } else { "no" })
            .expect("string write");
        for cell in &row.cells {
            let text = match cell {
                Some(c) => c.mae.to_string(),
                None => "unavailable".to_string(),
            };
            write!(out, "{text:>width$}").expect("string write");
        }
        out.push('\n');
    }
    out
}

fn render_comparison_table(avg: &[(ExtractorSet, f64, f64, f64)]) -> String {
    let mut out = String::new();
    writeln!(out, "{:18}{:>10}{:>10}{:>10}", "Models", "MAE", "sMAPE", "RMSE").expect("string write");
    for (set, mae, smape, rmse) in avg {
        writeln!(out, "{:18}{:>10.2}{:>10.2}{:>10.2}", format!("{set} (w/ CSR)"), mae, smape, rmse)
            .expect("string write");
    }
    out
}
