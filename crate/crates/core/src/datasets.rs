//! Per-atom descriptor datasets: the canonical CSV format, content hashing
//! and synthetic generators.
//!
//! File layout (UTF-8, `\n` line endings):
//!
//! ```text
//! # key=value                  optional metadata, one per line, sorted by key
//! structure_id,atom_index,group,fx,fy,fz,d0,...,d{D-1}
//! ...one row per atom...
//! ```
//!
//! Reals are written in Rust's shortest round-trip form, so a save of a
//! loaded file is byte-identical and every value survives bit-exactly.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const DEFAULT_GROUP: &str = "unlabeled";
const FIXED_COLUMNS: [&str; 6] = ["structure_id", "atom_index", "group", "fx", "fy", "fz"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub structure_id: String,
    pub atom_index: usize,
    pub group: String,
    /// Force on the atom (eV/Å).
    pub force: [f64; 3],
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    records: Vec<AtomRecord>,
    feature_dim: usize,
    /// Free-form provenance, e.g. descriptor settings.
    pub metadata: BTreeMap<String, String>,
}

impl FeatureDataset {
    pub fn new(mut records: Vec<AtomRecord>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InsufficientData("dataset has no records".into()))?;
        let feature_dim = first.features.len();
        if feature_dim == 0 {
            return Err(Error::InsufficientData("records carry no features".into()));
        }
        for (k, r) in records.iter_mut().enumerate() {
            if r.features.len() != feature_dim {
                return Err(Error::Parse {
                    row: k + 1,
                    message: format!("expected {feature_dim} features, found {}", r.features.len()),
                });
            }
            if r.features.iter().chain(&r.force).any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row: k + 1,
                    message: "non-finite value".into(),
                });
            }
            if r.group.is_empty() {
                r.group = DEFAULT_GROUP.to_string();
            }
        }
        Ok(Self {
            records,
            feature_dim,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn records(&self) -> &[AtomRecord] {
        &self.records
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.group.as_str()).collect()
    }

    pub fn group_labels(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.group.as_str()).collect()
    }

    pub fn feature_matrix(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.feature_dim, |i, j| self.records[i].features[j])
    }

    pub fn features_of(&self, rows: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), self.feature_dim, |i, j| self.records[rows[i]].features[j])
    }

    /// One Cartesian force component for the given rows.
    pub fn force_component(&self, rows: &[usize], component: usize) -> Vec<f64> {
        rows.iter().map(|&r| self.records[r].force[component]).collect()
    }

    /// A new dataset with the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let records = rows.iter().map(|&r| self.records[r].clone()).collect();
        Self::new(records, self.metadata.clone())
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        for (k, v) in &self.metadata {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::config(format!("metadata entry {k:?} cannot be serialized")));
            }
            writeln!(out, "# {k}={v}").map_err(|e| Error::io("<dataset>", e))?;
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((0..self.feature_dim).map(|d| format!("d{d}")));
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for r in &self.records {
            row.clear();
            row.push(r.structure_id.clone());
            row.push(r.atom_index.to_string());
            row.push(r.group.clone());
            row.extend(r.force.iter().chain(&r.features).map(|v| format_real(*v)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<dataset>", e))?;
        Ok(())
    }

    /// The canonical serialization.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_bytes()))
    }
}

/// Shortest representation that parses back to the same bits.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}

pub fn save_dataset(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    ds.write_to(&mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<FeatureDataset> {
    let reader = DatasetReader::new(input)?;
    let metadata = reader.metadata().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(records, metadata)
}

/// Streaming record reader; memory use is independent of file length.
pub struct DatasetReader<R: BufRead> {
    metadata: BTreeMap<String, String>,
    feature_dim: usize,
    records: csv::StringRecordsIntoIter<std::io::Chain<std::io::Cursor<Vec<u8>>, R>>,
    row: usize,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut metadata = BTreeMap::new();
        let mut line = String::new();
        loop {
            line.clear();
            let read = input.read_line(&mut line).map_err(|e| Error::io("<dataset>", e))?;
            if read == 0 || !line.starts_with('#') {
                break;
            }
            let body = line[1..].trim_end_matches(['\n', '\r']);
            let body = body.strip_prefix(' ').unwrap_or(body);
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                row: 0,
                message: format!("metadata line without '=': {body:?}"),
            })?;
            metadata.insert(k.to_string(), v.to_string());
        }
        // `line` holds the header (or is empty at EOF)
        let chained = std::io::Cursor::new(line.clone().into_bytes()).chain(input);
        let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(chained);
        let header = csv_reader.headers()?.clone();
        if header.len() < FIXED_COLUMNS.len() + 1 {
            return Err(Error::Parse {
                row: 0,
                message: format!("header has {} columns; need the 6 fixed columns and at least one feature", header.len()),
            });
        }
        for (k, want) in FIXED_COLUMNS.iter().enumerate() {
            if &header[k] != *want {
                return Err(Error::Parse {
                    row: 0,
                    message: format!("column {k} should be {want:?}, found {:?}", &header[k]),
                });
            }
        }
        for (d, name) in header.iter().skip(FIXED_COLUMNS.len()).enumerate() {
            if name != format!("d{d}") {
                return Err(Error::Parse {
                    row: 0,
                    message: format!("feature column {d} should be \"d{d}\", found {name:?}"),
                });
            }
        }
        Ok(Self {
            metadata,
            feature_dim: header.len() - FIXED_COLUMNS.len(),
            records: csv_reader.into_records(),
            row: 0,
        })
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn parse(&self, rec: &csv::StringRecord) -> Result<AtomRecord> {
        let row = self.row;
        let err = |message: String| Error::Parse { row, message };
        if rec.len() != FIXED_COLUMNS.len() + self.feature_dim {
            return Err(err(format!(
                "expected {} columns, found {}",
                FIXED_COLUMNS.len() + self.feature_dim,
                rec.len()
            )));
        }
        let real = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| err(format!("column {k}: {:?} is not a number", &rec[k])))?;
            if !v.is_finite() {
                return Err(err(format!("column {k}: non-finite value {:?}", &rec[k])));
            }
            Ok(v)
        };
        let atom_index = rec[1]
            .trim()
            .parse()
            .map_err(|_| err(format!("atom_index {:?} is not a non-negative integer", &rec[1])))?;
        let group = if rec[2].is_empty() { DEFAULT_GROUP } else { &rec[2] };
        Ok(AtomRecord {
            structure_id: rec[0].to_string(),
            atom_index,
            group: group.to_string(),
            force: [real(3)?, real(4)?, real(5)?],
            features: (FIXED_COLUMNS.len()..rec.len()).map(real).collect::<Result<_>>()?,
        })
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<AtomRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.records.next()?;
        self.row += 1;
        Some(match rec {
            Ok(rec) => self.parse(&rec),
            Err(e) => Err(Error::Parse {
                row: self.row,
                message: e.to_string(),
            }),
        })
    }
}

/// Hidden linear force map used by the synthetic generators:
/// `f = x · W + ε`, `ε ~ N(0, noise²)` per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearForceMap {
    /// `D x 3`.
    pub weights: Matrix,
    pub noise_sigma: f64,
}

impl LinearForceMap {
    pub fn random(dim: usize, noise_sigma: f64, rng: &mut impl Rng) -> Self {
        let weights = Matrix::from_fn(dim, 3, |_, _| rng.gen_range(-1.0..1.0));
        Self { weights, noise_sigma }
    }

    pub fn forces(&self, features: &[f64], rng: &mut impl Rng) -> [f64; 3] {
        let mut f = [0.0; 3];
        for (c, fc) in f.iter_mut().enumerate() {
            *fc = features
                .iter()
                .enumerate()
                .map(|(d, x)| x * self.weights.get(d, c))
                .sum();
            if self.noise_sigma > 0.0 {
                *fc += Normal::new(0.0, self.noise_sigma).expect("valid sigma").sample(rng);
            }
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub force_noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            per_cluster: 100,
            dim: 8,
            separation: 1.0,
            noise_sigma: 0.1,
            force_noise: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: FeatureDataset,
    pub force_map: LinearForceMap,
    /// `k x D`.
    pub centroids: Matrix,
    /// Generator cluster per row.
    pub labels: Vec<usize>,
}

/// Isotropic Gaussian blobs. Centroids are distinct points of an integer
/// lattice scaled by `separation`, so every pair is at least that far apart.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Synthetic> {
    if spec.clusters == 0 || spec.per_cluster == 0 || spec.dim == 0 {
        return Err(Error::config("clusters, per_cluster and dim must be >= 1"));
    }
    if !(spec.separation > 0.0) || !(spec.noise_sigma >= 0.0) || !(spec.force_noise >= 0.0) {
        return Err(Error::config("separation must be > 0 and noise levels >= 0"));
    }
    let mut r = rng(spec.seed);
    // smallest side m with m^D > k, so a free lattice point always exists
    let mut side = 2usize;
    while (side as f64).powi(spec.dim as i32) <= spec.clusters as f64 {
        side += 1;
    }
    let mut seen = HashSet::new();
    let mut centroids = Vec::with_capacity(spec.clusters);
    while centroids.len() < spec.clusters {
        let point: Vec<i64> = (0..spec.dim).map(|_| r.gen_range(0..side as i64)).collect();
        if seen.insert(point.clone()) {
            centroids.push(point.iter().map(|&c| c as f64 * spec.separation).collect::<Vec<f64>>());
        }
    }
    let force_map = LinearForceMap::random(spec.dim, spec.force_noise, &mut r);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut records = Vec::with_capacity(spec.clusters * spec.per_cluster);
    let mut labels = Vec::with_capacity(records.capacity());
    for (c, centre) in centroids.iter().enumerate() {
        for a in 0..spec.per_cluster {
            let features: Vec<f64> = centre
                .iter()
                .map(|&m| if spec.noise_sigma > 0.0 { m + normal.sample(&mut r) } else { m })
                .collect();
            let force = force_map.forces(&features, &mut r);
            records.push(AtomRecord {
                structure_id: format!("blob{c}"),
                atom_index: a,
                group: format!("blob{c}"),
                force,
                features,
            });
            labels.push(c);
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), "blobs".into());
    metadata.insert("seed".into(), spec.seed.to_string());
    Ok(Synthetic {
        dataset: FeatureDataset::new(records, metadata)?,
        force_map,
        centroids: Matrix::from_rows(&centroids)?,
        labels,
    })
}

/// Replicates every atom `factor` times with Gaussian jitter and relabels
/// forces through `force_map`. Copies of base row `i` occupy rows
/// `i·factor .. (i+1)·factor`.
pub fn synth_redundant(
    base: &FeatureDataset,
    force_map: &LinearForceMap,
    factor: usize,
    jitter: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    if factor == 0 {
        return Err(Error::config("duplication factor must be >= 1"));
    }
    if !(jitter >= 0.0) {
        return Err(Error::config("jitter must be >= 0"));
    }
    if force_map.weights.rows() != base.feature_dim() {
        return Err(Error::Shape {
            op: "synth_redundant",
            left: force_map.weights.shape(),
            right: (base.feature_dim(), 3),
        });
    }
    let mut r = rng(seed);
    let normal = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut records = Vec::with_capacity(base.len() * factor);
    for rec in base.records() {
        for copy in 0..factor {
            let features: Vec<f64> = rec
                .features
                .iter()
                .map(|&x| if jitter > 0.0 { x + normal.sample(&mut r) } else { x })
                .collect();
            let force = force_map.forces(&features, &mut r);
            records.push(AtomRecord {
                structure_id: rec.structure_id.clone(),
                atom_index: rec.atom_index * factor + copy,
                group: rec.group.clone(),
                force,
                features,
            });
        }
    }
    let mut metadata = base.metadata.clone();
    metadata.insert("redundant_factor".into(), factor.to_string());
    metadata.insert("redundant_jitter".into(), format_real(jitter));
    FeatureDataset::new(records, metadata)
}

/// Shuffled copy of `0..n` (test and example helper).
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::euclidean;
    use proptest::{prop_assert_eq, prop_assert_ne, proptest};

    fn parse(text: &str) -> Result<FeatureDataset> {
        read_dataset(text.as_bytes())
    }

    #[test]
    fn minimal_two_atom_file() {
        let ds = parse("structure_id,atom_index,group,fx,fy,fz,d0,d1\ns1,0,bulk,0.1,0.2,0.3,1.5,2\ns1,1,,0,0,0,-1,3e-3\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 2);
        assert_eq!(ds.records()[1].group, DEFAULT_GROUP);
        assert_eq!(ds.records()[1].features, vec![-1.0, 3e-3]);
    }

    #[test]
    fn nan_feature_names_row() {
        let err = parse("structure_id,atom_index,group,fx,fy,fz,d0\na,0,g,0,0,0,1\na,1,g,0,0,0,NaN\n").unwrap_err();
        match err {
            Error::Parse { row, message } => {
                assert_eq!(row, 2);
                assert!(message.contains("non-finite"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_and_missing_columns() {
        assert!(matches!(
            parse("structure_id,atom_index,group,fx,fy,fz,d0,d1\na,0,g,0,0,0,1\n"),
            Err(Error::Parse { row: 1, .. })
        ));
        assert!(matches!(
            parse("structure_id,atom_index,fx,fy,fz,d0\na,0,0,0,0,1\n"),
            Err(Error::Parse { row: 0, .. })
        ));
    }

    #[test]
    fn save_fills_group_and_has_6_plus_d_columns() {
        let rec = AtomRecord {
            structure_id: "s".into(),
            atom_index: 0,
            group: String::new(),
            force: [1.0, 2.0, 3.0],
            features: vec![0.5, 0.25, 0.125],
        };
        let ds = FeatureDataset::new(vec![rec], BTreeMap::new()).unwrap();
        let text = String::from_utf8(ds.to_canonical_bytes()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 6 + 3);
        assert_eq!(lines.next().unwrap(), "s,0,unlabeled,1.0,2.0,3.0,0.5,0.25,0.125");
    }

    #[test]
    fn metadata_survives() {
        let mut meta = BTreeMap::new();
        meta.insert("descriptor".to_string(), "bispectrum j_max=3".to_string());
        let ds = FeatureDataset::new(
            vec![AtomRecord {
                structure_id: "a,b".into(),
                atom_index: 3,
                group: "g".into(),
                force: [0.0; 3],
                features: vec![1.0],
            }],
            meta,
        )
        .unwrap();
        let back = read_dataset(&ds.to_canonical_bytes()[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn blobs_basic_properties() {
        let spec = BlobSpec {
            clusters: 5,
            per_cluster: 4,
            dim: 3,
            separation: 2.5,
            noise_sigma: 0.0,
            force_noise: 0.0,
            seed: 4,
        };
        let s = synth_blobs(&spec).unwrap();
        assert_eq!(s.dataset.len(), 20);
        for (row, rec) in s.dataset.records().iter().enumerate() {
            assert_eq!(rec.features, s.centroids.row(s.labels[row]));
        }
        for a in 0..5 {
            for b in a + 1..5 {
                assert!(euclidean(s.centroids.row(a), s.centroids.row(b)) >= 2.5 - 1e-12);
            }
        }
        let one = synth_blobs(&BlobSpec { clusters: 1, ..spec }).unwrap();
        assert_eq!(one.dataset.groups().len(), 1);
    }

    #[test]
    fn redundant_shapes() {
        let s = synth_blobs(&BlobSpec {
            per_cluster: 5,
            force_noise: 0.0,
            ..Default::default()
        })
        .unwrap();
        let same = synth_redundant(&s.dataset, &s.force_map, 1, 0.0, 1).unwrap();
        for (a, b) in same.records().iter().zip(s.dataset.records()) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.group, b.group);
        }
        let six = synth_redundant(&s.dataset, &s.force_map, 6, 0.01, 1).unwrap();
        assert_eq!(six.len(), 6 * s.dataset.len());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in 0u64..1000, n in 1usize..6, d in 1usize..5) {
            let mut r = rng(seed);
            let records: Vec<AtomRecord> = (0..n).map(|k| AtomRecord {
                structure_id: format!("s{}", k % 2),
                atom_index: k,
                group: ["bulk", "surface", "liquid"][k % 3].to_string(),
                force: [r.gen::<f64>() * 1e3 - 500.0, r.gen(), -r.gen::<f64>() * 1e-20],
                features: (0..d).map(|_| r.gen_range(-1e6..1e6) * r.gen::<f64>().powi(9)).collect(),
            }).collect();
            let ds = FeatureDataset::new(records, BTreeMap::new()).unwrap();
            let bytes = ds.to_canonical_bytes();
            let back = read_dataset(&bytes[..]).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.to_canonical_bytes(), bytes);
            prop_assert_eq!(back.content_hash(), ds.content_hash());
        }

        #[test]
        fn hash_tracks_content(seed in 0u64..1000) {
            let s = synth_blobs(&BlobSpec { per_cluster: 3, seed, ..Default::default() }).unwrap();
            let mut records = s.dataset.records().to_vec();
            let k = (seed as usize) % records.len();
            records[k].features[0] = f64::from_bits(records[k].features[0].to_bits() ^ 1);
            let changed = FeatureDataset::new(records, s.dataset.metadata.clone()).unwrap();
            prop_assert_ne!(changed.content_hash(), s.dataset.content_hash());
        }

        #[test]
        fn generators_are_reproducible(seed in 0u64..1000) {
            let spec = BlobSpec { per_cluster: 4, seed, ..Default::default() };
            let a = synth_blobs(&spec).unwrap();
            let b = synth_blobs(&spec).unwrap();
            prop_assert_eq!(a.dataset.content_hash(), b.dataset.content_hash());
            let ra = synth_redundant(&a.dataset, &a.force_map, 3, 0.05, seed).unwrap();
            let rb = synth_redundant(&b.dataset, &b.force_map, 3, 0.05, seed).unwrap();
            prop_assert_eq!(ra, rb);
        }
    }
}
