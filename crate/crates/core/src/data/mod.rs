//! Bags, datasets and their on-disk representation.
//!
//! A dataset on disk is a JSON manifest plus one or two `FEA1` containers:
//!
//! ```json
//! {
//!   "version": 1,
//!   "container": "features.fea",
//!   "priors_container": "priors.fea",
//!   "class_names": ["class_0", "class_1"],
//!   "instance_priors": "instance_priors",
//!   "bag_priors": "bag_priors",
//!   "bags": [{ "id": "bag_0000", "entry": "bag_0000", "label": 0 }]
//! }
//! ```
//!
//! Container paths are resolved relative to the manifest. `priors_container`
//! is optional and defaults to `container`.

pub mod container;
pub mod split;
pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub use container::{decode_container, encode_container, read_container, write_container, Entry};
pub use split::{kshot_split, Fold, SplitPlan, NUM_FOLDS};
pub use synth::{synth_generate, synth_generate_with_truth, SynthSpec, SynthTruth};

pub const MANIFEST_VERSION: u32 = 1;
pub const INSTANCE_PRIORS_ENTRY: &str = "instance_priors";
pub const BAG_PRIORS_ENTRY: &str = "bag_priors";

/// One labelled bag of instance embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: usize,
    /// `n x d`
    pub features: Matrix,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub class_names: Vec<String>,
    pub dim: usize,
    /// `K_t x d`, one row per textual prototype.
    pub instance_priors: Matrix,
    /// `c x d`, one query per class.
    pub bag_priors: Matrix,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn find(&self, id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.id == id)
    }

    /// Bag indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, b) in self.bags.iter().enumerate() {
            out[b.label].push(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Consistency("dataset has no classes".into()));
        }
        for b in &self.bags {
            if b.features.rows() == 0 {
                return Err(Error::Consistency(format!("bag {} has no instances", b.id)));
            }
            if b.features.cols() != self.dim {
                return Err(Error::Consistency(format!(
                    "bag {} has width {}, dataset width is {}",
                    b.id,
                    b.features.cols(),
                    self.dim
                )));
            }
            if b.label >= c {
                return Err(Error::Consistency(format!(
                    "bag {} has label {} but there are {c} classes",
                    b.id, b.label
                )));
            }
            if !b.features.is_finite() {
                return Err(Error::Consistency(format!(
                    "bag {} has non-finite features",
                    b.id
                )));
            }
        }
        if self.instance_priors.rows() == 0 || self.instance_priors.cols() != self.dim {
            return Err(Error::Consistency(format!(
                "instance priors are {:?}, expected K_t x {}",
                self.instance_priors.shape(),
                self.dim
            )));
        }
        if self.bag_priors.shape() != (c, self.dim) {
            return Err(Error::Consistency(format!(
                "bag priors are {:?}, expected {c} x {}",
                self.bag_priors.shape(),
                self.dim
            )));
        }
        let mut seen = HashMap::new();
        for b in &self.bags {
            if seen.insert(b.id.as_str(), ()).is_some() {
                return Err(Error::Consistency(format!("duplicate bag id {}", b.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub id: String,
    pub entry: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub container: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors_container: Option<String>,
    pub class_names: Vec<String>,
    #[serde(default = "default_instance_entry")]
    pub instance_priors: String,
    #[serde(default = "default_bag_entry")]
    pub bag_priors: String,
    pub bags: Vec<BagRecord>,
}

fn default_instance_entry() -> String {
    INSTANCE_PRIORS_ENTRY.into()
}

fn default_bag_entry() -> String {
    BAG_PRIORS_ENTRY.into()
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn take_entry(map: &mut HashMap<String, Matrix>, name: &str, path: &Path) -> Result<Matrix> {
    map.remove(name).ok_or_else(|| {
        Error::Consistency(format!("entry {name:?} missing from {}", path.display()))
    })
}

/// Loads and validates a dataset. `priors_override` replaces the manifest's priors container.
pub fn read_dataset(manifest_path: &Path, priors_override: Option<&Path>) -> Result<Dataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported manifest version {}",
            manifest_path.display(),
            manifest.version
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let features_path = base.join(&manifest.container);
    let mut features: HashMap<String, Matrix> = read_container(&features_path)?
        .into_iter()
        .map(|e| (e.name, e.matrix))
        .collect();

    let priors_path: PathBuf = match (priors_override, &manifest.priors_container) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => base.join(p),
        (None, None) => features_path.clone(),
    };
    let (instance_priors, bag_priors) = if priors_path == features_path {
        (
            take_entry(&mut features, &manifest.instance_priors, &priors_path)?,
            take_entry(&mut features, &manifest.bag_priors, &priors_path)?,
        )
    } else {
        let mut priors: HashMap<String, Matrix> = read_container(&priors_path)?
            .into_iter()
            .map(|e| (e.name, e.matrix))
            .collect();
        (
            take_entry(&mut priors, &manifest.instance_priors, &priors_path)?,
            take_entry(&mut priors, &manifest.bag_priors, &priors_path)?,
        )
    };

    let dim = instance_priors.cols();
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for rec in &manifest.bags {
        let features = features.get(&rec.entry).cloned().ok_or_else(|| {
            Error::Consistency(format!(
                "bag {} references entry {:?} which is not in {}",
                rec.id,
                rec.entry,
                features_path.display()
            ))
        })?;
        bags.push(Bag {
            id: rec.id.clone(),
            label: rec.label,
            features,
        });
    }
    let ds = Dataset {
        bags,
        class_names: manifest.class_names,
        dim,
        instance_priors,
        bag_priors,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `features.fea`, `priors.fea` and `manifest.json` into `dir`.
/// Returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<Entry> = ds
        .bags
        .iter()
        .map(|b| Entry::new(b.id.clone(), b.features.clone()))
        .collect();
    write_container(&dir.join("features.fea"), &entries)?;
    write_container(
        &dir.join("priors.fea"),
        &[
            Entry::new(INSTANCE_PRIORS_ENTRY, ds.instance_priors.clone()),
            Entry::new(BAG_PRIORS_ENTRY, ds.bag_priors.clone()),
        ],
    )?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        container: "features.fea".into(),
        priors_container: Some("priors.fea".into()),
        class_names: ds.class_names.clone(),
        instance_priors: INSTANCE_PRIORS_ENTRY.into(),
        bag_priors: BAG_PRIORS_ENTRY.into(),
        bags: ds
            .bags
            .iter()
            .map(|b| BagRecord {
                id: b.id.clone(),
                entry: b.id.clone(),
                label: b.label,
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads a CSV fixture: a header row, then one instance per line.
pub fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {}: {f:?} is not a number",
                        path.display(),
                        i + 2
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
