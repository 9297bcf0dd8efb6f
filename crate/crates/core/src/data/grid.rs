//! In-memory grid dataset and its on-disk layout.
//!
//! A dataset directory holds `manifest.json`, `features.bin` (little-endian
//! `f32`, rows ordered by domain, then class, then item) and `index.json`
//! with one `{domain, class, offset, count}` record per cell.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::synthetic::ShiftGenerator;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "fsqs-dataset";
pub const DATASET_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const FEATURES_FILE: &str = "features.bin";
const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub d_in: usize,
    pub class_count: usize,
    pub domain_count: usize,
    pub item_count: usize,
    /// Generation seed, if synthetic.
    pub seed: Option<u64>,
    pub generator: Option<ShiftGenerator>,
}

/// Rows `offset .. offset + count` of the feature table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellIndex {
    pub domain: usize,
    pub class: usize,
    pub offset: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    manifest: DatasetManifest,
    features: Array2<f32>,
    cells: Vec<CellIndex>,
}

impl GridDataset {
    /// Build from per-cell feature blocks given in `(domain, class)` order:
    /// `cells[domain * class_count + class]`.
    pub fn from_cells(
        name: impl Into<String>,
        class_count: usize,
        domain_count: usize,
        cells: Vec<Array2<f32>>,
        seed: Option<u64>,
        generator: Option<ShiftGenerator>,
    ) -> Result<Self> {
        if class_count == 0 || domain_count == 0 {
            return Err(Error::Input("dataset needs at least one class and one domain".into()));
        }
        if cells.len() != class_count * domain_count {
            return Err(Error::Dimension {
                what: "cell count",
                expected: class_count * domain_count,
                got: cells.len(),
            });
        }
        let d_in = cells[0].ncols();
        let mut index = Vec::with_capacity(cells.len());
        let mut offset = 0;
        for (i, c) in cells.iter().enumerate() {
            if c.ncols() != d_in {
                return Err(Error::Dimension {
                    what: "feature dimension",
                    expected: d_in,
                    got: c.ncols(),
                });
            }
            index.push(CellIndex {
                domain: i / class_count,
                class: i % class_count,
                offset,
                count: c.nrows(),
            });
            offset += c.nrows();
        }
        let views: Vec<_> = cells.iter().map(|c| c.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Input(format!("cannot stack cells: {e}")))?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            name: name.into(),
            d_in,
            class_count,
            domain_count,
            item_count: features.nrows(),
            seed,
            generator,
        };
        Ok(Self {
            manifest,
            features,
            cells: index,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn d_in(&self) -> usize {
        self.manifest.d_in
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    pub fn domain_count(&self) -> usize {
        self.manifest.domain_count
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    pub fn cell_index(&self) -> &[CellIndex] {
        &self.cells
    }

    fn cell_slot(&self, domain: usize, class: usize) -> Result<&CellIndex> {
        if domain >= self.domain_count() || class >= self.class_count() {
            return Err(Error::Input(format!(
                "cell (domain {domain}, class {class}) outside a {}x{} grid",
                self.domain_count(),
                self.class_count()
            )));
        }
        Ok(&self.cells[domain * self.class_count() + class])
    }

    pub fn cell_len(&self, domain: usize, class: usize) -> Result<usize> {
        Ok(self.cell_slot(domain, class)?.count)
    }

    pub fn cell(&self, domain: usize, class: usize) -> Result<ArrayView2<'_, f32>> {
        let c = self.cell_slot(domain, class)?;
        Ok(self
            .features
            .slice(ndarray::s![c.offset..c.offset + c.count, ..]))
    }

    /// Every item of the given classes and domains, labeled by position in
    /// `classes`.
    pub fn gather(&self, classes: &[usize], domains: &[usize]) -> Result<(Array2<f64>, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &d in domains {
            for (label, &c) in classes.iter().enumerate() {
                let cell = self.cell(d, c)?;
                rows.push(cell);
                labels.extend(std::iter::repeat_n(label, cell.nrows()));
            }
        }
        if rows.is_empty() {
            return Ok((Array2::zeros((0, self.d_in())), labels));
        }
        let stacked = ndarray::concatenate(Axis(0), &rows)
            .map_err(|e| Error::Input(format!("cannot stack cells: {e}")))?;
        Ok((stacked.mapv(f64::from), labels))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::with_capacity(self.features.len() * 4);
        for v in self.features.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(FEATURES_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(INDEX_FILE);
        fs::write(&path, serde_json::to_string(&self.cells)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| Error::io(&path, e))
        };
        let manifest: DatasetManifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::Input(format!(
                "{}: unsupported dataset format {} v{}",
                dir.display(),
                manifest.format,
                manifest.version
            )));
        }
        let cells: Vec<CellIndex> = serde_json::from_slice(&read(INDEX_FILE)?)?;
        let bytes = read(FEATURES_FILE)?;
        let expected = manifest.item_count * manifest.d_in * 4;
        if bytes.len() != expected {
            return Err(Error::Input(format!(
                "{}: feature file has {} bytes, manifest implies {expected}",
                dir.display(),
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let features = Array2::from_shape_vec((manifest.item_count, manifest.d_in), values)
            .map_err(|e| Error::Input(format!("feature table: {e}")))?;
        let ds = Self {
            manifest,
            features,
            cells,
        };
        ds.check_index()?;
        Ok(ds)
    }

    fn check_index(&self) -> Result<()> {
        let (nc, nd) = (self.class_count(), self.domain_count());
        if self.cells.len() != nc * nd {
            return Err(Error::Input(format!(
                "index has {} cells, grid is {nd}x{nc}",
                self.cells.len()
            )));
        }
        let mut offset = 0;
        for (i, c) in self.cells.iter().enumerate() {
            if c.domain != i / nc || c.class != i % nc || c.offset != offset {
                return Err(Error::Input(format!("index entry {i} is out of order")));
            }
            offset += c.count;
        }
        if offset != self.features.nrows() {
            return Err(Error::Input(format!(
                "index covers {offset} rows, feature table has {}",
                self.features.nrows()
            )));
        }
        Ok(())
    }
}
