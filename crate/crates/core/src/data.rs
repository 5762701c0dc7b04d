//! Bag files, dataset manifests, stratified fold assignment and the
//! synthetic co-occurrence generator.
//!
//! Bag file layout (little-endian):
//!
//! | bytes      | content                    |
//! |------------|----------------------------|
//! | 0..4       | magic `WKGB`               |
//! | 4..8       | u32 version (1)            |
//! | 8..12      | u32 instance count `n`     |
//! | 12..16     | u32 feature width `D_in`   |
//! | 16..       | `n·D_in` f32, row-major    |
//!
//! Manifests are CSV files with header `bag_path,label,fold`; bag paths are
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BAG_MAGIC: &[u8; 4] = b"WKGB";
pub const BAG_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// One labelled bag of instance features.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    /// `n×D_in`
    pub features: Tensor<f32>,
    pub label: usize,
}

impl Bag {
    pub fn new(id: impl Into<String>, features: Tensor<f32>, label: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n == 0 {
            return Err(Error::Input("a bag needs at least one instance".into()));
        }
        if !features.is_finite() {
            return Err(Error::Input("bag features must be finite".into()));
        }
        Ok(Self {
            id: id.into(),
            features,
            label,
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }
}

pub fn encode_bag(features: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, d) = features.dims2()?;
    if n == 0 {
        return Err(Error::Input("refusing to write a bag with zero instances".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_bag(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let bytes = encode_bag(features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a bag file image; `path` is only used in error messages.
pub fn decode_bag(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != BAG_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != BAG_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let n = word(8) as usize;
    if n == 0 {
        return Err(fail(8, "bag has zero instances".into()));
    }
    let d = word(12) as usize;
    if d == 0 {
        return Err(fail(12, "feature width is zero".into()));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| fail(8, "payload size overflows".into()))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        return Err(fail(
            HEADER_LEN,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Tensor::new(&[n, d], data)
}

pub fn read_bag_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(path, &bytes)
}

/// Reads a bag file; the id is the file stem.
pub fn read_bag(path: &Path, label: usize) -> Result<Bag> {
    let features = read_bag_features(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Bag::new(id, features, label)
}

/// Per-instance annotations stored next to a bag as `<stem>.meta.json`.
pub fn meta_path(bag_path: &Path) -> PathBuf {
    bag_path.with_extension("meta.json")
}

pub fn read_node_meta(bag_path: &Path) -> Result<Option<Vec<serde_json::Value>>> {
    let p = meta_path(bag_path);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub bag_path: String,
    pub label: usize,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the bag paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub n_classes: usize,
    pub d_in: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["bag_path", "label", "fold"] {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("expected header bag_path,label,fold, found {headers:?}"),
            });
        }
        let records: Vec<ManifestRecord> = reader.deserialize().collect::<Result<_, _>>()?;
        if records.is_empty() {
            return Err(Error::Input(format!("manifest {} lists no bags", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let first = root.join(&records[0].bag_path);
        let d_in = read_bag_features(&first)?.cols();
        let n_classes = records.iter().map(|r| r.label).max().unwrap_or(0).max(1) + 1;
        Ok(Self {
            root,
            records,
            n_classes,
            d_in,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn bag_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].bag_path)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Reads every bag the manifest lists.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut bags = Vec::with_capacity(self.records.len());
        let mut folds = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let bag = read_bag(&self.bag_path(i), r.label)?;
            if bag.d_in() != self.d_in {
                return Err(Error::dim(format!(
                    "bag {} has width {}, manifest width is {}",
                    r.bag_path,
                    bag.d_in(),
                    self.d_in
                )));
            }
            bags.push(bag);
            folds.push(r.fold.ok_or_else(|| {
                Error::Input(format!("bag {} has no fold assignment", r.bag_path))
            })?);
        }
        Dataset::new(bags, folds, self.n_classes)
    }
}

/// Bags held in memory with their fold assignments.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub folds: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, folds: Vec<usize>, n_classes: usize) -> Result<Self> {
        if bags.len() != folds.len() {
            return Err(Error::dim("one fold assignment per bag required"));
        }
        if let Some(b) = bags.iter().find(|b| b.label >= n_classes) {
            return Err(Error::Input(format!(
                "bag {} has label {} but only {n_classes} classes",
                b.id, b.label
            )));
        }
        Ok(Self {
            bags,
            folds,
            n_classes,
        })
    }

    pub fn n_folds(&self) -> usize {
        self.folds.iter().max().map_or(0, |m| m + 1)
    }

    pub fn d_in(&self) -> usize {
        self.bags.first().map_or(0, Bag::d_in)
    }

    pub fn fold_members(&self, fold: usize) -> Vec<&Bag> {
        self.bags
            .iter()
            .zip(&self.folds)
            .filter(|(_, &f)| f == fold)
            .map(|(b, _)| b)
            .collect()
    }

    pub fn min_bag_size(&self) -> usize {
        self.bags.iter().map(Bag::n).min().unwrap_or(0)
    }
}

/// Stratified assignment of each record to one of `folds` folds.
///
/// Within each class the members are shuffled and dealt round-robin,
/// continuing the rotation across classes, so per-class fold sizes differ by
/// at most one and overall fold sizes likewise.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::param(format!("need at least 2 folds, got {folds}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < folds {
            return Err(Error::param(format!(
                "class {c} has {} samples, fewer than {folds} folds",
                members.len()
            )));
        }
    }
    let mut rng = Rng::seeded(seed);
    let mut out = vec![0; labels.len()];
    let mut cursor = 0;
    for members in &mut by_class {
        rng.shuffle(members);
        for &i in members.iter() {
            out[i] = cursor % folds;
            cursor += 1;
        }
    }
    Ok(out)
}

/// Parameters of the synthetic co-occurrence task.
///
/// Instances are noisy copies of 8 orthonormal prototype directions.
/// Prototypes 0 (A) and 1 (B) are the key types; 2..8 are distractors. A
/// positive bag holds `m` instances of A and `m` of B; a negative bag holds
/// `2m` instances of a single key type. Only the joint presence of A and B
/// decides the label, and every bag carries the same amount of key mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CooccurrenceSpec {
    pub n_bags: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    pub min_key: usize,
    pub max_key: usize,
    pub seed: u64,
}

impl Default for CooccurrenceSpec {
    fn default() -> Self {
        Self {
            n_bags: 200,
            min_instances: 30,
            max_instances: 80,
            d_in: 384,
            noise_sigma: 0.25,
            min_key: 3,
            max_key: 6,
            seed: 0,
        }
    }
}

pub const BENCHMARK_SIGMA: f64 = 0.05;
pub const BENCHMARK_SEED: u64 = 11;
pub const BENCHMARK_FOLDS: usize = 4;

pub const N_PROTOTYPES: usize = 8;
pub const PROTO_A: usize = 0;
pub const PROTO_B: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBag {
    pub bag: Bag,
    /// Prototype index of every instance.
    pub assignments: Vec<usize>,
}

/// 8 orthonormal directions in `d_in` dimensions (Gram-Schmidt over
/// Gaussian draws).
pub fn prototypes(d_in: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if d_in < N_PROTOTYPES {
        return Err(Error::param(format!(
            "need d_in >= {N_PROTOTYPES} for orthonormal prototypes, got {d_in}"
        )));
    }
    let mut rng = Rng::derive(seed, 0x5052_4f54);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(N_PROTOTYPES);
    while basis.len() < N_PROTOTYPES {
        let mut v: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Ok(basis)
}

/// Label implied by per-instance prototype assignments.
pub fn cooccurrence_label(assignments: &[usize]) -> usize {
    let has = |p| assignments.contains(&p);
    usize::from(has(PROTO_A) && has(PROTO_B))
}

impl CooccurrenceSpec {
    /// The frozen 400-bag benchmark. The noise level is calibrated so that
    /// the graph model can resolve key instances while a mean-pooled linear
    /// readout stays at chance.
    pub fn benchmark() -> Self {
        Self {
            n_bags: 400,
            noise_sigma: BENCHMARK_SIGMA,
            seed: BENCHMARK_SEED,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bags == 0 || !self.n_bags.is_multiple_of(2) {
            return Err(Error::param(format!(
                "bag count must be positive and even, got {}",
                self.n_bags
            )));
        }
        if self.min_key == 0 || self.min_key > self.max_key {
            return Err(Error::param("key-instance range is empty"));
        }
        if self.min_instances > self.max_instances || self.min_instances < 2 * self.max_key {
            return Err(Error::param(format!(
                "instance range [{}, {}] cannot hold {} key instances",
                self.min_instances,
                self.max_instances,
                2 * self.max_key
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param("noise sigma must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Generates the bags in memory: half positive, the negatives split
    /// between A-only and B-only.
    pub fn generate(&self) -> Result<Vec<GeneratedBag>> {
        self.validate()?;
        let protos = prototypes(self.d_in, self.seed)?;
        let mut rng = Rng::derive(self.seed, 0x4241_4753);
        let mut out = Vec::with_capacity(self.n_bags);
        for b in 0..self.n_bags {
            let label = b % 2;
            let n = rng.int_inclusive(self.min_instances, self.max_instances);
            let m = rng.int_inclusive(self.min_key, self.max_key);
            let mut assignments = Vec::with_capacity(n);
            if label == 1 {
                assignments.extend(std::iter::repeat_n(PROTO_A, m));
                assignments.extend(std::iter::repeat_n(PROTO_B, m));
            } else {
                let key = if (b / 2) % 2 == 0 { PROTO_A } else { PROTO_B };
                assignments.extend(std::iter::repeat_n(key, 2 * m));
            }
            while assignments.len() < n {
                assignments.push(rng.int_inclusive(2, N_PROTOTYPES - 1));
            }
            rng.shuffle(&mut assignments);
            let mut data = Vec::with_capacity(n * self.d_in);
            for &p in &assignments {
                for &c in &protos[p] {
                    data.push((c + self.noise_sigma * rng.normal()) as f32);
                }
            }
            let features = Tensor::new(&[n, self.d_in], data)?;
            out.push(GeneratedBag {
                bag: Bag::new(format!("bag_{b:05}"), features, label)?,
                assignments,
            });
        }
        Ok(out)
    }

    /// Generates and assigns folds in memory.
    pub fn dataset(&self, folds: usize) -> Result<Dataset> {
        let bags: Vec<Bag> = self.generate()?.into_iter().map(|g| g.bag).collect();
        let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
        let assignment = kfold_split(&labels, folds, self.seed)?;
        Dataset::new(bags, assignment, 2)
    }
}

/// Writes a generated dataset under `dir`: one bag file and one metadata
/// file per bag, `manifest.csv`, and `dataset.json` with the generator
/// parameters. Returns the manifest.
pub fn gen_cooccurrence_dataset(
    spec: &CooccurrenceSpec,
    folds: usize,
    dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let labels: Vec<usize> = (0..spec.n_bags).map(|b| b % 2).collect();
    let assignment = kfold_split(&labels, folds, spec.seed)?;
    let bags = spec.generate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(bags.len());
    for (g, fold) in bags.iter().zip(assignment) {
        let rel = format!("{}.wkgb", g.bag.id);
        let path = dir.join(&rel);
        write_bag(&path, &g.bag.features)?;
        let meta: Vec<String> = g.assignments.iter().map(|p| format!("proto{p}")).collect();
        let mp = meta_path(&path);
        fs::write(&mp, serde_json::to_string(&meta)?).map_err(|e| Error::io(&mp, e))?;
        records.push(ManifestRecord {
            bag_path: rel,
            label: g.bag.label,
            fold: Some(fold),
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        records,
        n_classes: 2,
        d_in: spec.d_in,
    };
    manifest.save(&dir.join("manifest.csv"))?;
    let info = serde_json::json!({ "generator": spec, "folds": folds });
    let ip = dir.join("dataset.json");
    fs::write(&ip, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&ip, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CooccurrenceSpec {
        CooccurrenceSpec {
            n_bags: 20,
            min_instances: 12,
            max_instances: 20,
            d_in: 16,
            noise_sigma: 0.0,
            min_key: 1,
            max_key: 3,
            seed: 3,
        }
    }

    #[test]
    fn bag_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::seeded(1);
        let x = Tensor::<f32>::randn(&[5, 384], 1.0, &mut rng);
        let p = dir.path().join("b.wkgb");
        write_bag(&p, &x).unwrap();
        let back = read_bag(&p, 1).unwrap();
        assert_eq!(back.id, "b");
        assert!(back
            .features
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let x = Tensor::<f32>::filled(&[3, 4], 1.0);
        let mut bytes = encode_bag(&x).unwrap();
        bytes.truncate(bytes.len() - 6);
        let err = decode_bag(Path::new("t.wkgb"), &bytes).unwrap_err().to_string();
        assert!(err.contains("expected 48"), "{err}");
        assert!(err.contains("found 42"), "{err}");
    }

    #[test]
    fn zero_instances_and_bad_magic_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(BAG_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        let err = decode_bag(Path::new("z"), &bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }));
        bytes[0] = b'X';
        assert!(matches!(
            decode_bag(Path::new("z"), &bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(encode_bag(&Tensor::<f32>::new(&[0, 4], vec![]).unwrap()).is_err());
    }

    #[test]
    fn non_finite_payload_reports_offset() {
        let x = Tensor::<f32>::filled(&[2, 2], 1.0);
        let mut bytes = encode_bag(&x).unwrap();
        bytes[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_bag(Path::new("n"), &bytes),
            Err(Error::Format { offset: 24, .. })
        ));
    }

    #[test]
    fn noiseless_bags_contain_exact_prototypes() {
        let spec = small_spec();
        let protos = prototypes(spec.d_in, spec.seed).unwrap();
        for g in spec.generate().unwrap() {
            assert_eq!(cooccurrence_label(&g.assignments), g.bag.label);
            for (i, &p) in g.assignments.iter().enumerate() {
                for (a, b) in g.bag.features.row(i).iter().zip(&protos[p]) {
                    assert_eq!(*a, *b as f32);
                }
            }
        }
    }

    #[test]
    fn generator_rejects_infeasible_ranges() {
        let odd = CooccurrenceSpec { n_bags: 3, ..small_spec() };
        assert!(matches!(odd.generate(), Err(Error::Parameter(_))));
        let tight = CooccurrenceSpec {
            min_instances: 4,
            ..small_spec()
        };
        assert!(matches!(tight.generate(), Err(Error::Parameter(_))));
        let narrow = CooccurrenceSpec { d_in: 4, ..small_spec() };
        assert!(narrow.generate().is_err());
    }

    #[test]
    fn kfold_balanced_and_deterministic() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let a = kfold_split(&labels, 4, 9).unwrap();
        assert_eq!(a, kfold_split(&labels, 4, 9).unwrap());
        for f in 0..4 {
            let members: Vec<usize> = (0..100).filter(|&i| a[i] == f).collect();
            assert_eq!(members.len(), 25);
            let pos = members.iter().filter(|&&i| labels[i] == 1).count();
            assert!(pos == 12 || pos == 13);
        }
    }

    #[test]
    fn kfold_rejects_small_classes() {
        assert!(matches!(kfold_split(&[0, 1, 0], 4, 0), Err(Error::Parameter(_))));
        assert!(kfold_split(&[0, 1, 0, 1], 1, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_cooccurrence_dataset(&small_spec(), 4, dir.path()).unwrap();
        let back = DatasetManifest::load(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back, m);
        let ds = back.load_dataset().unwrap();
        assert_eq!(ds.bags.len(), 20);
        assert_eq!(ds.n_folds(), 4);
        let meta = read_node_meta(&back.bag_path(0)).unwrap().unwrap();
        assert_eq!(meta.len(), ds.bags[0].n());
    }
}
