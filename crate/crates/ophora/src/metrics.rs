//! Quality metrics: Fréchet distance between Gaussian fits of feature
//! matrices (the shared math behind FID and FVD; the extractor only changes
//! the source fingerprint), omega-scaled clamped-cosine CLIP score, and the
//! feature-file interchange formats.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

pub const DEFAULT_OMEGA: f64 = 100.0;
pub const REGULARIZATION_EPSILON: f64 = 1e-6;
const SINGULAR_EIGENVALUE_FLOOR: f64 = 1e-10;
const RESIDUE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("Gaussian fit needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite feature value at row {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("negative residue {0} exceeds tolerance in matrix square root")]
    ResidueAboveTolerance(f64),
    #[error("zero vector passed to clip_score")]
    ZeroVector,
    #[error("pairing leaves rows unpaired: {0}")]
    UnpairedRows(String),
    #[error("feature file {path}: {message}")]
    Format { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// n rows of d-dimensional externally extracted features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dims: usize,
    pub data: Vec<f32>,
    /// Extractor fingerprint; distinguishes image-level from video-level
    /// feature providers.
    pub source: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dims: usize, data: Vec<f32>) -> Result<Self, MetricsError> {
        if data.len() != rows * dims {
            return Err(MetricsError::DimMismatch(data.len(), rows * dims));
        }
        for (i, chunk) in data.chunks(dims.max(1)).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(MetricsError::NonFinite(i));
            }
        }
        Ok(FeatureMatrix {
            rows,
            dims,
            data,
            source: String::new(),
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Row mean and unbiased (n-1) covariance, symmetrized.
pub fn fit_gaussian(features: &FeatureMatrix) -> Result<GaussianStats, MetricsError> {
    let (n, d) = (features.rows, features.dims);
    if n < 2 {
        return Err(MetricsError::TooFewRows(n));
    }
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            mu[j] += v as f64;
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = features.row(i);
        for a in 0..d {
            let da = row[a] as f64 - mu[a];
            for b in a..d {
                let db = row[b] as f64 - mu[b];
                sigma[(a, b)] += da * db;
            }
        }
    }
    sigma /= (n - 1) as f64;
    for a in 0..d {
        for b in 0..a {
            sigma[(a, b)] = sigma[(b, a)];
        }
    }
    Ok(GaussianStats { mu, sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    /// True when near-singular covariances forced the epsilon*I
    /// regularization of both inputs.
    pub regularized: bool,
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let sym = (m + m.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let mut values = eigen.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < -RESIDUE_TOLERANCE {
            return Err(MetricsError::ResidueAboveTolerance(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eigen.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&values) * q.transpose())
}

/// Fréchet distance between two Gaussians:
/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
///
/// The matrix square root uses the symmetric form sqrt(S_a)*S_b*sqrt(S_a),
/// whose eigendecomposition stays real for PSD inputs; tiny negative
/// eigenvalues are clamped, larger ones are an error. Near-singular inputs
/// get epsilon*I added to both sides and the result is marked regularized.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<FrechetResult, MetricsError> {
    if a.mu.len() != b.mu.len() {
        return Err(MetricsError::DimMismatch(a.mu.len(), b.mu.len()));
    }
    let min_eig = |s: &DMatrix<f64>| {
        let sym = (s + s.transpose()) * 0.5;
        sym.symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |acc, &v| acc.min(v))
    };
    let regularized = min_eig(&a.sigma) < SINGULAR_EIGENVALUE_FLOOR
        || min_eig(&b.sigma) < SINGULAR_EIGENVALUE_FLOOR;
    let d = a.mu.len();
    let eye = DMatrix::identity(d, d) * REGULARIZATION_EPSILON;
    let (sigma_a, sigma_b) = if regularized {
        (&a.sigma + &eye, &b.sigma + &eye)
    } else {
        (a.sigma.clone(), b.sigma.clone())
    };
    let sqrt_a = symmetric_sqrt(&sigma_a)?;
    let product = &sqrt_a * &sigma_b * &sqrt_a;
    let sqrt_product = symmetric_sqrt(&product)?;
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let trace_term = sigma_a.trace() + sigma_b.trace() - 2.0 * sqrt_product.trace();
    let mut distance = mean_term + trace_term;
    if distance < 0.0 {
        if distance < -RESIDUE_TOLERANCE {
            return Err(MetricsError::ResidueAboveTolerance(distance));
        }
        distance = 0.0;
    }
    Ok(FrechetResult {
        distance,
        regularized,
    })
}

/// omega * max(cosine, 0), with both vectors normalized internally. The
/// cosine is clamped to [-1, 1] so identical vectors score exactly omega.
pub fn clip_score(video: &[f64], text: &[f64], omega: f64) -> Result<f64, MetricsError> {
    if video.len() != text.len() {
        return Err(MetricsError::DimMismatch(video.len(), text.len()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (nv, nt) = (norm(video), norm(text));
    if nv == 0.0 || nt == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    let dot: f64 = video.iter().zip(text).map(|(a, b)| a * b).sum();
    let cosine = (dot / (nv * nt)).clamp(-1.0, 1.0);
    Ok(omega * cosine.max(0.0))
}

/// Mean per-pair clip score over a total pairing of video and text rows.
pub fn corpus_clip_score(
    videos: &FeatureMatrix,
    texts: &FeatureMatrix,
    pairing: &[(usize, usize)],
    omega: f64,
) -> Result<f64, MetricsError> {
    let mut video_seen = vec![false; videos.rows];
    let mut text_seen = vec![false; texts.rows];
    for &(v, t) in pairing {
        video_seen[v] = true;
        text_seen[t] = true;
    }
    let unpaired_v = video_seen.iter().filter(|&&s| !s).count();
    let unpaired_t = text_seen.iter().filter(|&&s| !s).count();
    if unpaired_v > 0 || unpaired_t > 0 || pairing.is_empty() {
        return Err(MetricsError::UnpairedRows(format!(
            "{unpaired_v} video rows, {unpaired_t} text rows"
        )));
    }
    let mut total = 0.0;
    for &(v, t) in pairing {
        let video: Vec<f64> = videos.row(v).iter().map(|&x| x as f64).collect();
        let text: Vec<f64> = texts.row(t).iter().map(|&x| x as f64).collect();
        total += clip_score(&video, &text, omega)?;
    }
    Ok(total / pairing.len() as f64)
}

const MAGIC: &[u8; 4] = b"OPHF";
const FORMAT_VERSION: u16 = 1;

/// Binary feature format: magic "OPHF", version u16, rows u32, dims u32,
/// then rows*dims little-endian f32 row-major. `.csv` paths use the CSV twin
/// with a d0..dN-1 header.
pub fn write_features(features: &FeatureMatrix, path: &Path) -> Result<(), MetricsError> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        return write_features_csv(features, path);
    }
    let err = |e: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = std::fs::File::create(path).map_err(err)?;
    file.write_all(MAGIC).map_err(err)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(err)?;
    file.write_all(&(features.rows as u32).to_le_bytes()).map_err(err)?;
    file.write_all(&(features.dims as u32).to_le_bytes()).map_err(err)?;
    let mut payload = Vec::with_capacity(features.data.len() * 4);
    for v in &features.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&payload).map_err(err)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, MetricsError> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        return read_features_csv(path);
    }
    let err = |e: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let fmt = |message: String| MetricsError::Format {
        path: path.display().to_string(),
        message,
    };
    let mut file = std::fs::File::open(path).map_err(err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(err)?;
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dims = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = &bytes[14..];
    if payload.len() != rows * dims * 4 {
        return Err(fmt(format!(
            "payload {} bytes inconsistent with {rows}x{dims} f32",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(rows, dims, data)
}

fn write_features_csv(features: &FeatureMatrix, path: &Path) -> Result<(), MetricsError> {
    let err = |e: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = std::fs::File::create(path).map_err(err)?;
    let header: Vec<String> = (0..features.dims).map(|i| format!("d{i}")).collect();
    writeln!(file, "{}", header.join(",")).map_err(err)?;
    for i in 0..features.rows {
        let row: Vec<String> = features.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{}", row.join(",")).map_err(err)?;
    }
    Ok(())
}

fn read_features_csv(path: &Path) -> Result<FeatureMatrix, MetricsError> {
    let err = |e: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let fmt = |message: String| MetricsError::Format {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(err)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fmt("empty file".into()))?;
    let dims = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != dims {
            return Err(fmt(format!("row {} has {} values, expected {dims}", i + 2, values.len())));
        }
        for v in values {
            data.push(
                v.trim()
                    .parse::<f32>()
                    .map_err(|e| fmt(format!("row {}: {e}", i + 2)))?,
            );
        }
        rows += 1;
    }
    FeatureMatrix::new(rows, dims, data)
}
