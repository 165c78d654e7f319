//! Weight-similarity toolkit: single-window SSIM over kernel slices,
//! optimal channel matching, similarity curves over checkpoint series, and
//! kernel/feature-map image export.
//!
//! SSIM here is the luminance-contrast-structure product computed once over
//! a whole flattened kernel slice (3x3 kernels are far too small for sliding
//! windows), with unbiased standard deviations. Stabilizers follow the
//! conventional choice c1 = (0.01·L)^2, c2 = (0.03·L)^2, c3 = c2/2 with
//! L = 1 after joint min-max normalization.
//!
//! Channel matching maximizes total SSIM with the O(n^3) assignment
//! algorithm; a brute-force permutation oracle certifies it in tests for
//! n <= 7.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_observed, Checkpoint, NetworkSpec, ObserveOptions, RegimeParams};
use crate::tensor::Tensor;

/// Conventional SSIM stabilizers for data normalized to unit dynamic range.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_C3: f64 = 4.5e-4;

/// Luminance-contrast-structure similarity over two equally shaped tensors,
/// treated as flat vectors. Uses unbiased variance, so inputs need at least
/// two elements.
///
/// The contrast and structure terms share one `sqrt(var_x · var_y)` factor;
/// with y = x that factor reduces to exactly `var_x`, making
/// `ssim(x, x) == 1.0` bitwise.
pub fn ssim(x: &Tensor, y: &Tensor, c1: f64, c2: f64, c3: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "ssim",
            format!("shapes {:?} and {:?} differ", x.shape(), y.shape()),
        ));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::contract(
            "ssim",
            "need at least 2 elements for an unbiased variance",
        ));
    }
    let nf = n as f64;
    let mx = x.data().iter().sum::<f64>() / nf;
    let my = y.data().iter().sum::<f64>() / nf;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let da = a - mx;
        let db = b - my;
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    let denom = nf - 1.0;
    vx /= denom;
    vy /= denom;
    cov /= denom;
    let sxsy = (vx * vy).sqrt();
    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
    let c = (2.0 * sxsy + c2) / (vx + vy + c2);
    let s = (cov + c3) / (sxsy + c3);
    Ok(l * c * s)
}

/// How kernel slices are scaled before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Raw weights.
    Identity,
    /// Both slices mapped by their shared min/max to [0, 1]; a zero range
    /// maps everything to 0.
    JointMinMax,
}

/// Pairwise SSIM between out-channels of one layer in two checkpoints.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub layer: String,
    /// values[i, j] = ssim(channel i of A, channel j of B).
    pub values: Tensor,
    pub normalization: Normalization,
    /// True when the two layers had different in-channel counts and slices
    /// were reduced to per-position means over in-channels before scoring.
    pub reduced_in_channels: bool,
}

fn kernel_slices(ckpt: &Checkpoint, layer: &str) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let key = format!("{}.weight", layer);
    let w = ckpt.params.get(&key).ok_or_else(|| {
        Error::contract(
            "kernel_similarity_matrix",
            format!("layer {} has no weight parameter", layer),
        )
    })?;
    if w.rank() != 4 {
        return Err(Error::shape(
            "kernel_similarity_matrix",
            format!("{} is not a conv weight (shape {:?})", key, w.shape()),
        ));
    }
    let s = w.shape();
    let (out, cin, kh, kw) = (s[0], s[1], s[2], s[3]);
    let slice_len = cin * kh * kw;
    let slices = (0..out)
        .map(|i| w.data()[i * slice_len..(i + 1) * slice_len].to_vec())
        .collect();
    Ok((out, cin, slices))
}

/// Reduces a [cin, kh·kw] slice to its per-position mean over in-channels.
fn mean_over_in(slice: &[f64], cin: usize) -> Vec<f64> {
    let plane = slice.len() / cin;
    let mut out = vec![0.0; plane];
    for c in 0..cin {
        for (o, &v) in out.iter_mut().zip(&slice[c * plane..(c + 1) * plane]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= cin as f64;
    }
    out
}

fn joint_min_max(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.iter().chain(b) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let map = |s: &[f64]| -> Vec<f64> {
        if range == 0.0 {
            vec![0.0; s.len()]
        } else {
            s.iter().map(|&v| (v - lo) / range).collect()
        }
    };
    (map(a), map(b))
}

/// SSIM between every out-channel pair of `layer` in `a` and `b`. The two
/// layers must agree on out-channel count; differing in-channel counts are
/// handled by comparing per-position means over in-channels.
pub fn kernel_similarity_matrix(
    a: &Checkpoint,
    b: &Checkpoint,
    layer: &str,
    normalization: Normalization,
) -> Result<SimilarityMatrix> {
    let (out_a, cin_a, slices_a) = kernel_slices(a, layer)?;
    let (out_b, cin_b, slices_b) = kernel_slices(b, layer)?;
    if out_a != out_b {
        return Err(Error::shape(
            "kernel_similarity_matrix",
            format!("layer {} out-channels differ: {} vs {}", layer, out_a, out_b),
        ));
    }
    let reduced = cin_a != cin_b;
    let prep = |slices: Vec<Vec<f64>>, cin: usize| -> Vec<Vec<f64>> {
        if reduced {
            slices.iter().map(|s| mean_over_in(s, cin)).collect()
        } else {
            slices
        }
    };
    let sa = prep(slices_a, cin_a);
    let sb = prep(slices_b, cin_b);

    let mut values = Tensor::zeros(&[out_a, out_a]);
    for i in 0..out_a {
        for j in 0..out_a {
            let (xa, xb) = match normalization {
                Normalization::Identity => (sa[i].clone(), sb[j].clone()),
                Normalization::JointMinMax => joint_min_max(&sa[i], &sb[j]),
            };
            let ta = Tensor::new(&[xa.len()], xa)?;
            let tb = Tensor::new(&[xb.len()], xb)?;
            values.set(&[i, j], ssim(&ta, &tb, SSIM_C1, SSIM_C2, SSIM_C3)?);
        }
    }
    Ok(SimilarityMatrix {
        layer: layer.to_string(),
        values,
        normalization,
        reduced_in_channels: reduced,
    })
}

/// A maximal-total-score assignment of A-channels to B-channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Matching {
    /// permutation[i] = B-channel assigned to A-channel i.
    pub permutation: Vec<usize>,
    pub total_score: f64,
    pub normalization: Normalization,
}

/// Maximum-total assignment over a square score matrix via the O(n^3)
/// potential-based algorithm (run on negated scores).
pub fn hungarian_match(m: &SimilarityMatrix) -> Result<Matching> {
    let permutation = assign_max(&m.values)?;
    let mut total = 0.0;
    for (i, &j) in permutation.iter().enumerate() {
        total += m.values.at(&[i, j]);
    }
    Ok(Matching {
        permutation,
        total_score: total,
        normalization: m.normalization,
    })
}

fn assign_max(values: &Tensor) -> Result<Vec<usize>> {
    let s = values.shape();
    if values.rank() != 2 || s[0] != s[1] {
        return Err(Error::shape(
            "hungarian_match",
            format!("need a square matrix, got {:?}", s),
        ));
    }
    let n = s[0];
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost = |i: usize, j: usize| -> f64 { -values.at(&[i, j]) };

    // Potentials u (rows) and v (columns); p[j] is the row matched to
    // column j, with index 0 as the virtual unmatched slot (1-based).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// One point of a similarity curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub matched_mean_ssim: f64,
}

/// Hungarian-matched mean SSIM of `layer` between each checkpoint in
/// `series` and the fixed `reference`. Epochs are read from checkpoint
/// metadata.
pub fn similarity_curve(
    series: &[Checkpoint],
    reference: &Checkpoint,
    layer: &str,
    normalization: Normalization,
) -> Result<Vec<CurvePoint>> {
    if series.len() < 2 {
        return Err(Error::contract(
            "similarity_curve",
            "need at least 2 checkpoints for a curve",
        ));
    }
    let mut out = Vec::with_capacity(series.len());
    for ckpt in series {
        let m = kernel_similarity_matrix(ckpt, reference, layer, normalization)?;
        let matched = hungarian_match(&m)?;
        let n = matched.permutation.len().max(1);
        out.push(CurvePoint {
            epoch: ckpt.meta.epoch,
            matched_mean_ssim: matched.total_score / n as f64,
        });
    }
    Ok(out)
}

/// Renders a curve as CSV with a header row.
pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("epoch,matched_mean_ssim\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.epoch, p.matched_mean_ssim));
    }
    s
}

/// Writes one grayscale byte image in binary PGM (P5); `data` is row-major
/// over `h` rows of `w` columns, min-max scaled to 0..=255. A zero range
/// renders uniform mid-gray.
fn write_pgm(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let mut bytes = Vec::with_capacity(data.len());
    for &v in data {
        let b = if range == 0.0 {
            128u8
        } else {
            ((v - lo) / range * 255.0).round() as u8
        };
        bytes.push(b);
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.replace(['.', '/', '\\'], "_")
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightMapManifest {
    layer: String,
    permutation: Vec<usize>,
    total_score: f64,
    normalization: Normalization,
    files: Vec<String>,
}

/// Exports each out-channel kernel of `layer` as one PGM image (in-channels
/// tiled side by side), ordered by the matching when given: file position p
/// holds the A-channel assigned to B-channel p. Returns the written image
/// paths; a JSON manifest records layer, order, and normalization.
pub fn export_weight_maps(
    ckpt: &Checkpoint,
    layer: &str,
    matching: Option<&Matching>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (out, cin, slices) = kernel_slices(ckpt, layer)?;
    let key = format!("{}.weight", layer);
    let s = ckpt.params[&key].shape();
    let (kh, kw) = (s[2], s[3]);
    let order: Vec<usize> = match matching {
        None => (0..out).collect(),
        Some(m) => {
            if m.permutation.len() != out {
                return Err(Error::contract(
                    "export_weight_maps",
                    format!(
                        "matching over {} channels does not fit layer {} with {}",
                        m.permutation.len(),
                        layer,
                        out
                    ),
                ));
            }
            let mut inv = vec![0usize; out];
            for (i, &j) in m.permutation.iter().enumerate() {
                inv[j] = i;
            }
            inv
        }
    };
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut paths = Vec::new();
    for (pos, &ch) in order.iter().enumerate() {
        // Tile in-channels horizontally: [kh, cin*kw].
        let slice = &slices[ch];
        let mut img = vec![0.0f64; kh * cin * kw];
        for c in 0..cin {
            for y in 0..kh {
                for x in 0..kw {
                    img[y * (cin * kw) + c * kw + x] = slice[(c * kh + y) * kw + x];
                }
            }
        }
        let name = format!("{}_k{:02}.pgm", sanitize(layer), pos);
        let path = dir.join(&name);
        write_pgm(&path, &img, kh, cin * kw)?;
        files.push(name);
        paths.push(path);
    }
    let manifest = WeightMapManifest {
        layer: layer.to_string(),
        permutation: match matching {
            Some(m) => m.permutation.clone(),
            None => (0..out).collect(),
        },
        total_score: matching.map(|m| m.total_score).unwrap_or(out as f64),
        normalization: matching.map(|m| m.normalization).unwrap_or(Normalization::Identity),
        files,
    };
    let mpath = dir.join(format!("{}_matching.json", sanitize(layer)));
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")?;
    paths.push(mpath);
    Ok(paths)
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureMapEntry {
    layer: String,
    channel: usize,
    file: String,
}

/// Runs the network once, capturing the named layers' output currents
/// (time-averaged for multi-step regimes), and writes one PGM per channel of
/// the first sample. Returns the written paths; an index manifest lists
/// layer and channel per file.
pub fn export_feature_maps(
    spec: &NetworkSpec,
    ckpt: &Checkpoint,
    input: &Tensor,
    layers: &[String],
    rp: &RegimeParams,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let opts = ObserveOptions {
        capture: layers.to_vec(),
    };
    let (_, stats) = forward_observed(spec, ckpt, input, rp, &opts)?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut paths = Vec::new();
    for layer in layers {
        let map = stats.captures.get(layer).ok_or_else(|| {
            Error::contract(
                "export_feature_maps",
                format!("layer {} was not captured (not a conv/dense layer?)", layer),
            )
        })?;
        if map.rank() != 4 {
            return Err(Error::shape(
                "export_feature_maps",
                format!("capture of {} has shape {:?}, expected [N,C,H,W]", layer, map.shape()),
            ));
        }
        let s = map.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        for ch in 0..c {
            let start = ch * h * w;
            let plane = &map.data()[start..start + h * w];
            let name = format!("{}_c{:02}.pgm", sanitize(layer), ch);
            let path = dir.join(&name);
            write_pgm(&path, plane, h, w)?;
            entries.push(FeatureMapEntry {
                layer: layer.clone(),
                channel: ch,
                file: name,
            });
            paths.push(path);
        }
    }
    let mpath = dir.join("features_manifest.json");
    let index: BTreeMap<&str, &Vec<FeatureMapEntry>> =
        [("maps", &entries)].into_iter().collect();
    std::fs::write(&mpath, serde_json::to_string_pretty(&index)? + "\n")?;
    paths.push(mpath);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, micro_resnet, CheckpointMeta};
    use crate::tensor::Rng;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn tensor(data: &[f64]) -> Tensor {
        Tensor::new(&[data.len()], data.to_vec()).unwrap()
    }

    fn random_tensor(rng: &mut Rng, n: usize) -> Tensor {
        tensor(&(0..n).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let x = tensor(&[0.3, -0.7, 1.2, 0.05, -2.0]);
        assert_eq!(ssim(&x, &x, SSIM_C1, SSIM_C2, SSIM_C3).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_two_constants_is_the_luminance_term() {
        // Dyadic values over a power-of-two length keep the means exact.
        let a = 0.25;
        let b = 0.75;
        let x = tensor(&[a; 4]);
        let y = tensor(&[b; 4]);
        let got = ssim(&x, &y, SSIM_C1, SSIM_C2, SSIM_C3).unwrap();
        let l = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert_eq!(got, l);
    }

    #[test]
    fn ssim_of_negated_zero_mean_matches_closed_form() {
        let x = tensor(&[1.0, -1.0, 0.5, -0.5]);
        let y = x.scale(-1.0);
        let got = ssim(&x, &y, SSIM_C1, SSIM_C2, SSIM_C3).unwrap();
        let v = (1.0 + 1.0 + 0.25 + 0.25) / 3.0;
        let expect = (SSIM_C3 - v) / (SSIM_C3 + v);
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
    }

    #[test]
    fn ssim_rejects_degenerate_inputs() {
        let x = tensor(&[1.0]);
        assert!(ssim(&x, &x, SSIM_C1, SSIM_C2, SSIM_C3).is_err());
        let a = tensor(&[1.0, 2.0]);
        let b = tensor(&[1.0, 2.0, 3.0]);
        assert!(ssim(&a, &b, SSIM_C1, SSIM_C2, SSIM_C3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]
        #[test]
        fn ssim_is_symmetric_and_bounded(seed in 0u64..5000, n in 2usize..40) {
            let mut rng = Rng::new(seed);
            let x = random_tensor(&mut rng, n);
            let y = random_tensor(&mut rng, n);
            let xy = ssim(&x, &y, SSIM_C1, SSIM_C2, SSIM_C3).unwrap();
            let yx = ssim(&y, &x, SSIM_C1, SSIM_C2, SSIM_C3).unwrap();
            prop_assert!((xy - yx).abs() < 1e-12);
            prop_assert!(xy.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn joint_min_max_ssim_ignores_common_affine_maps(
            seed in 0u64..5000, scale in 0.1f64..10.0, shift in -5.0f64..5.0
        ) {
            let mut rng = Rng::new(seed);
            let a = random_tensor(&mut rng, 27);
            let b = random_tensor(&mut rng, 27);
            let (na, nb) = joint_min_max(a.data(), b.data());
            let base = ssim(&tensor(&na), &tensor(&nb), SSIM_C1, SSIM_C2, SSIM_C3).unwrap();
            let a2 = a.scale(scale).add_scalar(shift);
            let b2 = b.scale(scale).add_scalar(shift);
            let (ma, mb) = joint_min_max(a2.data(), b2.data());
            let mapped = ssim(&tensor(&ma), &tensor(&mb), SSIM_C1, SSIM_C2, SSIM_C3).unwrap();
            prop_assert!((base - mapped).abs() < 1e-9, "{} vs {}", base, mapped);
        }
    }

    fn conv_checkpoint(rng: &mut Rng, out: usize, cin: usize) -> Checkpoint {
        let mut params = std::collections::BTreeMap::new();
        params.insert(
            "conv1.weight".to_string(),
            random_tensor(rng, out * cin * 9).reshape(&[out, cin, 3, 3]).unwrap(),
        );
        params.insert("conv1.bias".to_string(), Tensor::zeros(&[out]));
        Checkpoint {
            spec_hash: [0; 32],
            meta: CheckpointMeta::default(),
            params,
        }
    }

    #[test]
    fn self_similarity_diagonal_is_ones() {
        let mut rng = Rng::new(7);
        let ckpt = conv_checkpoint(&mut rng, 6, 3);
        let m = kernel_similarity_matrix(&ckpt, &ckpt, "conv1", Normalization::Identity).unwrap();
        for i in 0..6 {
            assert_eq!(m.values.at(&[i, i]), 1.0);
        }
        assert!(!m.reduced_in_channels);
        assert!(m.values.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn missing_layer_is_a_named_error() {
        let mut rng = Rng::new(8);
        let ckpt = conv_checkpoint(&mut rng, 4, 2);
        let err = kernel_similarity_matrix(&ckpt, &ckpt, "нет", Normalization::Identity)
            .unwrap_err()
            .to_string();
        assert!(err.contains("нет"));
    }

    #[test]
    fn differing_in_channels_use_channel_means() {
        let mut rng = Rng::new(9);
        let a = conv_checkpoint(&mut rng, 4, 3);
        // Build b with 2 in-channels, both equal to a's per-position mean,
        // so the reduced comparison sees identical slices.
        let wa = &a.params["conv1.weight"];
        let mut wb = Tensor::zeros(&[4, 2, 3, 3]);
        for o in 0..4 {
            for pos in 0..9 {
                let mean = (0..3).map(|c| wa.data()[(o * 3 + c) * 9 + pos]).sum::<f64>() / 3.0;
                for c in 0..2 {
                    wb.data_mut()[(o * 2 + c) * 9 + pos] = mean;
                }
            }
        }
        let mut b = conv_checkpoint(&mut rng, 4, 2);
        b.params.insert("conv1.weight".to_string(), wb);
        let m = kernel_similarity_matrix(&a, &b, "conv1", Normalization::Identity).unwrap();
        assert!(m.reduced_in_channels);
        for i in 0..4 {
            assert!((m.values.at(&[i, i]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_recovers_a_channel_permutation() {
        let mut rng = Rng::new(10);
        let a = conv_checkpoint(&mut rng, 6, 2);
        let perm = [3usize, 0, 4, 5, 1, 2];
        let wa = &a.params["conv1.weight"];
        let mut wb = Tensor::zeros(&[6, 2, 3, 3]);
        let slice = 2 * 9;
        for (i, &j) in perm.iter().enumerate() {
            // A-channel i becomes B-channel perm[i].
            wb.data_mut()[j * slice..(j + 1) * slice]
                .copy_from_slice(&wa.data()[i * slice..(i + 1) * slice]);
        }
        let mut b = conv_checkpoint(&mut rng, 6, 2);
        b.params.insert("conv1.weight".to_string(), wb);
        let m = kernel_similarity_matrix(&a, &b, "conv1", Normalization::JointMinMax).unwrap();
        let matched = hungarian_match(&m).unwrap();
        assert_eq!(matched.permutation, perm);
        assert!((matched.total_score - 6.0).abs() < 1e-9, "{}", matched.total_score);
    }

    fn matrix_from(values: Tensor) -> SimilarityMatrix {
        SimilarityMatrix {
            layer: "conv1".into(),
            values,
            normalization: Normalization::Identity,
            reduced_in_channels: false,
        }
    }

    #[test]
    fn two_by_two_matching_example() {
        let m = matrix_from(Tensor::new(&[2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap());
        let matched = hungarian_match(&m).unwrap();
        assert_eq!(matched.permutation, vec![0, 1]);
        assert!((matched.total_score - 1.7).abs() < 1e-12);
    }

    #[test]
    fn dominant_diagonal_gives_identity_permutation() {
        let mut v = Tensor::full(&[5, 5], 0.3);
        for i in 0..5 {
            v.set(&[i, i], 1.0);
        }
        let matched = hungarian_match(&matrix_from(v)).unwrap();
        assert_eq!(matched.permutation, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn non_square_matrix_rejected() {
        let m = matrix_from(Tensor::zeros(&[2, 3]));
        assert!(hungarian_match(&m).is_err());
    }

    fn brute_force_max(values: &Tensor) -> f64 {
        let n = values.shape()[0];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::NEG_INFINITY;
        // Heap's algorithm over all permutations.
        fn heap(k: usize, perm: &mut Vec<usize>, values: &Tensor, best: &mut f64) {
            if k <= 1 {
                let total: f64 = perm.iter().enumerate().map(|(i, &j)| values.at(&[i, j])).sum();
                if total > *best {
                    *best = total;
                }
                return;
            }
            for i in 0..k {
                heap(k - 1, perm, values, best);
                if k % 2 == 0 {
                    perm.swap(i, k - 1);
                } else {
                    perm.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut perm, values, &mut best);
        best
    }

    #[test]
    fn six_by_six_matches_brute_force() {
        let mut rng = Rng::new(11);
        let v = Tensor::new(&[6, 6], (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let matched = hungarian_match(&matrix_from(v.clone())).unwrap();
        let best = brute_force_max(&v);
        assert!((matched.total_score - best).abs() < 1e-9, "{} vs {}", matched.total_score, best);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn assignment_is_optimal_up_to_seven(seed in 0u64..10_000, n in 1usize..8) {
            let mut rng = Rng::new(seed);
            let v = Tensor::new(&[n, n], (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let matched = hungarian_match(&matrix_from(v.clone())).unwrap();
            // Bijection check.
            let mut seen = vec![false; n];
            for &j in &matched.permutation {
                prop_assert!(!seen[j]);
                seen[j] = true;
            }
            let best = brute_force_max(&v);
            prop_assert!((matched.total_score - best).abs() < 1e-9);
        }
    }

    #[test]
    fn own_series_against_final_ends_at_one() {
        let spec = micro_resnet(1, 16, 3);
        let mut series = Vec::new();
        for (epoch, seed) in [(0usize, 21u64), (1, 22), (2, 23)] {
            let mut ckpt = build(&spec, &mut Rng::new(seed)).unwrap();
            ckpt.meta.epoch = epoch;
            series.push(ckpt);
        }
        let reference = series.last().unwrap().clone();
        let curve =
            similarity_curve(&series, &reference, "conv1", Normalization::JointMinMax).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(curve[2].epoch, 2);
        assert!((curve[2].matched_mean_ssim - 1.0).abs() < 1e-12);
        assert!(curve.iter().all(|p| p.matched_mean_ssim.abs() <= 1.0 + 1e-12));
        let csv = curve_to_csv(&curve);
        assert!(csv.starts_with("epoch,matched_mean_ssim\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn short_series_rejected() {
        let spec = micro_resnet(1, 16, 3);
        let ckpt = build(&spec, &mut Rng::new(1)).unwrap();
        assert!(similarity_curve(
            std::slice::from_ref(&ckpt),
            &ckpt,
            "conv1",
            Normalization::Identity
        )
        .is_err());
    }

    #[test]
    fn zero_kernel_exports_mid_gray() {
        let mut rng = Rng::new(31);
        let mut ckpt = conv_checkpoint(&mut rng, 2, 1);
        let z = Tensor::zeros(&[2, 1, 3, 3]);
        ckpt.params.insert("conv1.weight".to_string(), z);
        let dir = tempfile::tempdir().unwrap();
        let paths = export_weight_maps(&ckpt, "conv1", None, dir.path()).unwrap();
        let img = std::fs::read(&paths[0]).unwrap();
        let header = b"P5\n3 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn sixteen_kernels_export_sixteen_images_plus_manifest() {
        let mut rng = Rng::new(32);
        let ckpt = conv_checkpoint(&mut rng, 16, 2);
        let m = kernel_similarity_matrix(&ckpt, &ckpt, "conv1", Normalization::JointMinMax).unwrap();
        let matched = hungarian_match(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_weight_maps(&ckpt, "conv1", Some(&matched), dir.path()).unwrap();
        assert_eq!(paths.len(), 17);
        let manifest = std::fs::read_to_string(paths.last().unwrap()).unwrap();
        let parsed: WeightMapManifest = serde_json::from_str(&manifest).unwrap();
        assert_eq!(parsed.permutation.len(), 16);
        assert_eq!(parsed.files.len(), 16);
    }

    #[test]
    fn export_is_byte_deterministic() {
        let mut rng = Rng::new(33);
        let ckpt = conv_checkpoint(&mut rng, 4, 2);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = export_weight_maps(&ckpt, "conv1", None, d1.path()).unwrap();
        let p2 = export_weight_maps(&ckpt, "conv1", None, d2.path()).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }

    #[test]
    fn feature_maps_export_per_channel_images() {
        let spec = crate::model::conv_stack(1, 8, &[(4, 2)], 3);
        let mut rng = Rng::new(34);
        let ckpt = build(&spec, &mut rng).unwrap();
        let input = Tensor::full(&[1, 1, 8, 8], 0.6);
        let dir = tempfile::tempdir().unwrap();
        let paths = export_feature_maps(
            &spec,
            &ckpt,
            &input,
            &["conv1".to_string()],
            &RegimeParams::lif(4),
            dir.path(),
        )
        .unwrap();
        // 4 channels + manifest.
        assert_eq!(paths.len(), 5);
        let header = std::fs::read(&paths[0]).unwrap();
        assert_eq!(&header[..3], b"P5\n");
    }
}
