//! Inter-band Pearson correlation over the training scenes and selection of
//! the texture (SWIR) band and the RGB embedding bands.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::SatelliteScene;

/// Mean per-scene Pearson coefficients between band pairs, with the most
/// conservative (maximum) per-scene p-value.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub p_values: Vec<Vec<f64>>,
    /// Per-pair count of scenes excluded because a band was constant there.
    pub excluded: Vec<Vec<u32>>,
    pub n_scenes: usize,
}

impl CorrelationMatrix {
    pub fn n_bands(&self) -> usize {
        self.labels.len()
    }
}

/// 1-based storage positions of the selected bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSelection {
    pub texture_band: usize,
    pub embedding_bands: (usize, usize, usize),
}

impl BandSelection {
    pub fn validate(&self, n_bands: usize) -> Result<()> {
        let (r, g, b) = self.embedding_bands;
        let all = [self.texture_band, r, g, b];
        if all.iter().any(|&i| i == 0 || i > n_bands) {
            return Err(Error::InvalidConfig(format!(
                "band selection {self:?} out of range 1..={n_bands}"
            )));
        }
        if [r, g, b].contains(&self.texture_band) || r == g || g == b || r == b {
            return Err(Error::InvalidConfig(format!(
                "band selection {self:?} reuses a band"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SelectionPolicy {
    /// The published choice: SWIR band 12 for texture, bands 4/3/2 as RGB.
    PaperDefault,
    /// Single-linkage clusters at |rho| >= threshold; from the cluster
    /// holding the SWIR bands, pick the band with the lowest mean |rho|
    /// against bands outside the cluster. RGB bands stay the named trio.
    Automatic { threshold: f64, swir_bands: Vec<String> },
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of the Pearson coefficient under the usual t-test with
/// n-2 degrees of freedom.
fn pearson_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let one_minus_r2 = 1.0 - r * r;
    if one_minus_r2 <= 0.0 {
        return 0.0;
    }
    let t2 = r * r * df / one_minus_r2;
    reg_inc_beta(df / 2.0, 0.5, df / (df + t2))
}

/// Lanczos log-gamma (g = 7, 9 terms).
fn ln_gamma(z: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * z).sin().ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Continued fraction for the incomplete beta (Lentz's method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_IT: usize = 300;
    const EPS: f64 = 3.0e-16;
    const FPMIN: f64 = 1.0e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_IT {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub(crate) fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// Entry (a, b) is the mean over scenes of the per-scene Pearson
/// correlation between the flattened pixels of bands a and b. Scenes where
/// either band is constant are excluded from that pair's mean and counted;
/// a pair excluded everywhere is an error.
pub fn correlation_matrix(training_scenes: &[SatelliteScene]) -> Result<CorrelationMatrix> {
    if training_scenes.len() < 2 {
        return Err(Error::TooFewScenes { need: 2, got: training_scenes.len() });
    }
    for s in training_scenes {
        if s.uniform_mpp().is_none() {
            return Err(Error::NonUniformScene(format!("{} {}", s.region, s.epiweek)));
        }
    }
    let n_bands = training_scenes[0].bands.len();
    if training_scenes.iter().any(|s| s.bands.len() != n_bands) {
        return Err(Error::InvalidConfig("scenes disagree on band count".to_string()));
    }
    let labels: Vec<String> = training_scenes[0].bands.iter().map(|b| b.name.clone()).collect();

    // Deterministic reduction: scenes in chronological order.
    let mut order: Vec<&SatelliteScene> = training_scenes.iter().collect();
    order.sort_by_key(|s| (s.epiweek, s.region.clone()));

    // Per-scene upper-triangle correlations, computed in parallel, reduced
    // in the sorted order.
    let per_scene: Vec<Vec<Option<(f64, f64)>>> = order
        .par_iter()
        .map(|scene| {
            let mut tri = Vec::with_capacity(n_bands * (n_bands + 1) / 2);
            for a in 0..n_bands {
                for b in a..n_bands {
                    let x = scene.bands[a].raster.as_slice();
                    let y = scene.bands[b].raster.as_slice();
                    tri.push(pearson(x, y).map(|r| (r, pearson_p_value(r, x.len()))));
                }
            }
            tri
        })
        .collect();

    let mut values = vec![vec![0.0f64; n_bands]; n_bands];
    let mut p_values = vec![vec![0.0f64; n_bands]; n_bands];
    let mut excluded = vec![vec![0u32; n_bands]; n_bands];
    let mut k = 0usize;
    for a in 0..n_bands {
        for b in a..n_bands {
            let mut sum_r = 0.0;
            let mut max_p = 0.0f64;
            let mut used = 0u32;
            let mut skipped = 0u32;
            for tri in &per_scene {
                match tri[k] {
                    Some((r, p)) => {
                        sum_r += r;
                        max_p = max_p.max(p);
                        used += 1;
                    }
                    None => skipped += 1,
                }
            }
            if used == 0 {
                return Err(Error::UndefinedCorrelation { a: a + 1, b: b + 1 });
            }
            let (r, p) = if a == b { (1.0, 0.0) } else { (sum_r / f64::from(used), max_p) };
            values[a][b] = r;
            values[b][a] = r;
            p_values[a][b] = p;
            p_values[b][a] = p;
            excluded[a][b] = skipped;
            excluded[b][a] = skipped;
            k += 1;
        }
    }

    Ok(CorrelationMatrix { labels, values, p_values, excluded, n_scenes: training_scenes.len() })
}

/// Case-insensitive band-name match tolerating zero padding (B4 == B04).
fn band_position(labels: &[String], name: &str) -> Option<usize> {
    let norm = |s: &str| -> String {
        let s = s.trim().to_uppercase();
        match s.strip_prefix('B') {
            Some(rest) => format!("B{}", rest.trim_start_matches('0')),
            None => s,
        }
    };
    let want = norm(name);
    labels.iter().position(|l| norm(l) == want).map(|i| i + 1)
}

pub fn select_bands(corr: &CorrelationMatrix, policy: &SelectionPolicy) -> Result<BandSelection> {
    let labels = &corr.labels;
    let rgb = || -> Result<(usize, usize, usize)> {
        let find = |n: &str| {
            band_position(labels, n).ok_or_else(|| {
                Error::InvalidConfig(format!("band {n} not present in {labels:?}"))
            })
        };
        Ok((find("B4")?, find("B3")?, find("B2")?))
    };

    match policy {
        SelectionPolicy::PaperDefault => {
            let texture = band_position(labels, "B12").ok_or_else(|| {
                Error::InvalidConfig(format!("band B12 not present in {labels:?}"))
            })?;
            let selection = BandSelection { texture_band: texture, embedding_bands: rgb()? };
            selection.validate(corr.n_bands())?;
            Ok(selection)
        }
        SelectionPolicy::Automatic { threshold, swir_bands } => {
            let n = corr.n_bands();
            // Single-linkage clusters: union bands with |rho| >= threshold.
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(parent: &mut Vec<usize>, i: usize) -> usize {
                if parent[i] != i {
                    let root = find(parent, parent[i]);
                    parent[i] = root;
                }
                parent[i]
            }
            for a in 0..n {
                for b in a + 1..n {
                    if corr.values[a][b].abs() >= *threshold {
                        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                        if ra != rb {
                            parent[ra] = rb;
                        }
                    }
                }
            }
            let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
            let swir_positions: Vec<usize> = swir_bands
                .iter()
                .filter_map(|name| band_position(labels, name).map(|p| p - 1))
                .collect();
            if swir_positions.is_empty() {
                return Err(Error::NoSwirCluster);
            }
            // The SWIR cluster must contain at least two bands.
            let cluster_root = swir_positions
                .iter()
                .map(|&p| roots[p])
                .find(|&root| roots.iter().filter(|&&r| r == root).count() >= 2)
                .ok_or(Error::NoSwirCluster)?;
            let members: Vec<usize> = (0..n).filter(|&i| roots[i] == cluster_root).collect();
            let outside: Vec<usize> = (0..n).filter(|&i| roots[i] != cluster_root).collect();
            if outside.is_empty() {
                return Err(Error::NoSwirCluster);
            }
            // Lowest mean |rho| against bands outside the cluster, SWIR
            // members only.
            let texture = swir_positions
                .iter()
                .filter(|p| members.contains(p))
                .map(|&p| {
                    let mean: f64 = outside.iter().map(|&o| corr.values[p][o].abs()).sum::<f64>()
                        / outside.len() as f64;
                    (p, mean)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite means"))
                .map(|(p, _)| p + 1)
                .ok_or(Error::NoSwirCluster)?;

            let selection = BandSelection { texture_band: texture, embedding_bands: rgb()? };
            selection.validate(corr.n_bands())?;
            Ok(selection)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epiweek::EpiWeek;
    use crate::ingestion::SceneBand;
    use crate::raster::Raster;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scene_with_bands(week: u32, bands: Vec<(&str, Vec<f64>)>) -> SatelliteScene {
        let side = (bands[0].1.len() as f64).sqrt() as usize;
        SatelliteScene {
            region: "X".into(),
            epiweek: EpiWeek::new(2017, week).unwrap(),
            bands: bands
                .into_iter()
                .map(|(name, data)| SceneBand {
                    name: name.to_string(),
                    mpp: 10,
                    raster: Raster::from_vec(side, data.len() / side, data),
                })
                .collect(),
        }
    }

    fn random_band(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..100.0)).collect()
    }

    #[test]
    fn affine_dependence_gives_unit_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scenes: Vec<_> = (1..=2)
            .map(|w| {
                let a = random_band(&mut rng, 64);
                let b: Vec<f64> = a.iter().map(|&v| 2.0 * v + 5.0).collect();
                let neg: Vec<f64> = a.iter().map(|&v| -v).collect();
                scene_with_bands(w, vec![("B1", a), ("B2", b), ("B3", neg)])
            })
            .collect();
        let m = correlation_matrix(&scenes).unwrap();
        assert!((m.values[0][1] - 1.0).abs() < 1e-12);
        assert!((m.values[0][2] + 1.0).abs() < 1e-12);
        assert!(m.p_values[0][1] < 1e-9);
    }

    #[test]
    fn planted_correlation_recovered_within_tolerance() {
        // b = rho*z1 + sqrt(1-rho^2)*z2 via the 2x2 Cholesky factor.
        let rho = 0.6f64;
        let n = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut make = |w: u32| {
            let z1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let b: Vec<f64> = z1
                .iter()
                .zip(&z2)
                .map(|(&a, &c)| rho * a + (1.0 - rho * rho).sqrt() * c)
                .collect();
            scene_with_bands(w, vec![("B1", z1), ("B2", b)])
        };
        let scenes = vec![make(1), make(2)];
        let m = correlation_matrix(&scenes).unwrap();

        // Closed-form sample estimator, computed independently per scene.
        let mut oracle_sum = 0.0;
        for s in &scenes {
            let x = s.bands[0].raster.as_slice();
            let y = s.bands[1].raster.as_slice();
            let nf = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / nf, y.iter().sum::<f64>() / nf);
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
            let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
            oracle_sum += sxy / (sxx * syy).sqrt();
        }
        let oracle = oracle_sum / 2.0;
        assert!((m.values[0][1] - oracle).abs() < 1e-12);
        assert!((m.values[0][1] - rho).abs() < 0.03, "got {}", m.values[0][1]);
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scenes: Vec<_> = (1..=3)
            .map(|w| {
                scene_with_bands(
                    w,
                    vec![
                        ("B1", random_band(&mut rng, 100)),
                        ("B2", random_band(&mut rng, 100)),
                        ("B3", random_band(&mut rng, 100)),
                    ],
                )
            })
            .collect();
        let m = correlation_matrix(&scenes).unwrap();
        for a in 0..3 {
            assert!((m.values[a][a] - 1.0).abs() < 1e-12);
            for b in 0..3 {
                assert!((m.values[a][b] - m.values[b][a]).abs() < 1e-12);
                assert!(m.values[a][b].abs() <= 1.0);
                assert!((0.0..=1.0).contains(&m.p_values[a][b]));
            }
        }
    }

    #[test]
    fn invariant_under_positive_affine_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<Vec<f64>> = (0..2).map(|_| random_band(&mut rng, 64)).collect();
        let scenes = vec![
            scene_with_bands(1, vec![("B1", base[0].clone()), ("B2", base[1].clone())]),
            scene_with_bands(2, vec![("B1", base[1].clone()), ("B2", base[0].clone())]),
        ];
        let m0 = correlation_matrix(&scenes).unwrap();

        let scale = |v: &[f64], a: f64, b: f64| v.iter().map(|&x| a * x + b).collect::<Vec<_>>();
        let scenes2 = vec![
            scene_with_bands(1, vec![("B1", scale(&base[0], 3.5, 100.0)), ("B2", scale(&base[1], 0.25, -7.0))]),
            scene_with_bands(2, vec![("B1", scale(&base[1], 3.5, 100.0)), ("B2", scale(&base[0], 0.25, -7.0))]),
        ];
        let m1 = correlation_matrix(&scenes2).unwrap();
        assert!((m0.values[0][1] - m1.values[0][1]).abs() < 1e-10);
    }

    #[test]
    fn constant_band_scenes_are_excluded_and_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scenes = vec![
            scene_with_bands(1, vec![("B1", vec![7.0; 64]), ("B2", random_band(&mut rng, 64))]),
            scene_with_bands(2, vec![("B1", random_band(&mut rng, 64)), ("B2", random_band(&mut rng, 64))]),
        ];
        let m = correlation_matrix(&scenes).unwrap();
        assert_eq!(m.excluded[0][1], 1);

        let all_constant = vec![
            scene_with_bands(1, vec![("B1", vec![7.0; 64]), ("B2", random_band(&mut rng, 64))]),
            scene_with_bands(2, vec![("B1", vec![9.0; 64]), ("B2", random_band(&mut rng, 64))]),
        ];
        assert!(matches!(
            correlation_matrix(&all_constant),
            Err(Error::UndefinedCorrelation { a: 1, .. })
        ));
    }

    fn matrix_from(labels: &[&str], values: Vec<Vec<f64>>) -> CorrelationMatrix {
        let n = labels.len();
        CorrelationMatrix {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            p_values: vec![vec![0.0; n]; n],
            excluded: vec![vec![0; n]; n],
            values,
            n_scenes: 2,
        }
    }

    fn twelve_band_labels() -> Vec<&'static str> {
        vec!["B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12"]
    }

    #[test]
    fn paper_default_selection_is_constant() {
        let labels = twelve_band_labels();
        let n = labels.len();
        let m = matrix_from(&labels, vec![vec![0.5; n]; n]);
        let sel = select_bands(&m, &SelectionPolicy::PaperDefault).unwrap();
        assert_eq!(sel.texture_band, 12);
        assert_eq!(sel.embedding_bands, (4, 3, 2));
        sel.validate(12).unwrap();
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn automatic_mode_picks_lowest_external_correlation_swir_band() {
        // Clusters: {B04, B03, B02} highly correlated, {B11, B12} highly
        // correlated; B11 has the lower mean |rho| against outside bands.
        let labels = vec!["B02", "B03", "B04", "B11", "B12"];
        let mut v = vec![vec![0.0; 5]; 5];
        for i in 0..5 {
            v[i][i] = 1.0;
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            v[a][b] = 0.9;
            v[b][a] = 0.9;
        }
        v[3][4] = 0.95;
        v[4][3] = 0.95;
        for visible in 0..3 {
            v[3][visible] = 0.2;
            v[visible][3] = 0.2;
            v[4][visible] = 0.4;
            v[visible][4] = 0.4;
        }
        let m = matrix_from(&labels, v);
        let policy = SelectionPolicy::Automatic {
            threshold: 0.8,
            swir_bands: vec!["B11".into(), "B12".into()],
        };
        let sel = select_bands(&m, &policy).unwrap();
        assert_eq!(sel.texture_band, 4); // B11 at position 4
    }

    #[test]
    fn automatic_mode_identity_matrix_errors() {
        let labels = twelve_band_labels();
        let n = labels.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let m = matrix_from(&labels, v);
        let policy = SelectionPolicy::Automatic {
            threshold: 0.8,
            swir_bands: vec!["B11".into(), "B12".into()],
        };
        assert!(matches!(select_bands(&m, &policy), Err(Error::NoSwirCluster)));
    }

    #[test]
    fn student_t_tail_matches_table_values() {
        // Two-sided p for t at the 0.05 critical point.
        let p = |t: f64, df: f64| reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
        assert!((p(2.306004135, 8.0) - 0.05).abs() < 1e-6);
        assert!((p(4.302652730, 2.0) - 0.05).abs() < 1e-6);
        // Cauchy (df=1): P(|T| > 1) = 0.5 exactly.
        assert!((p(1.0, 1.0) - 0.5).abs() < 1e-10);
        // Uniform check of the underlying incomplete beta: I_x(1,1) = x.
        assert!((reg_inc_beta(1.0, 1.0, 0.3) - 0.3).abs() < 1e-12);
    }
}
