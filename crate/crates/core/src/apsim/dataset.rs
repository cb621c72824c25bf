//! On-disk datasets: `manifest.json` plus one binary file per case.
//!
//! Case file layout (all integers little-endian `u32`):
//! `"IBRC"`, version, U, M, T, `x` as `f32` row-major `U×T`, `y` as `f32`
//! row-major `M×T`, JSON length, [`CaseMeta`] JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmpib_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::geometry::{build_forward_operator, Geometry, GridSpec, TissueMap};
use crate::rng::{derive_seed, streams};

use super::{
    add_noise, project, simulate_tmp, CaseMeta, CaseSampler, DifficultyTag, EcgSequence,
    PoolConfig, SimConfig, TmpSequence,
};

pub const CASE_MAGIC: &[u8; 4] = b"IBRC";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CASES_DIR: &str = "cases";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub tag: DifficultyTag,
    pub count: usize,
    pub rotation_deg: f64,
}

impl PlanEntry {
    pub fn new(tag: DifficultyTag, count: usize, rotation_deg: f64) -> Self {
        Self {
            tag,
            count,
            rotation_deg,
        }
    }
}

/// Everything that determines a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub grid: GridSpec,
    pub sim: SimConfig,
    pub pools: PoolConfig,
    pub snr_db: f64,
    pub base_seed: u64,
    pub plan: Vec<PlanEntry>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.plan.is_empty() {
            return Err(CoreError::config("split plan is empty"));
        }
        if let Some(e) = self.plan.iter().find(|e| e.count == 0) {
            return Err(CoreError::config(format!("split {} has count 0", e.tag)));
        }
        if !self.snr_db.is_finite() {
            return Err(CoreError::config("snr_db must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "U")]
    pub u: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: usize,
    pub tag: DifficultyTag,
    pub rotation_deg: f64,
    pub seed: u64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: Dims,
    pub spec: DatasetSpec,
    pub cases: Vec<ManifestCase>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: usize,
    pub x: TmpSequence,
    pub y: EcgSequence,
    pub meta: CaseMeta,
}

impl Case {
    pub fn scar_mask(&self, geom: &Geometry) -> Vec<bool> {
        (0..geom.num_nodes())
            .map(|n| geom.lattice_distance(n, self.meta.scar_center) <= self.meta.scar_radius)
            .collect()
    }
}

pub fn case_file_name(id: usize) -> String {
    format!("case_{id}.bin")
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Simulates case `id` of the plan. Values are rounded to `f32`, matching
/// what a reader of the file sees.
pub fn generate_case(
    spec: &DatasetSpec,
    geom: &Geometry,
    sampler: &CaseSampler,
    id: usize,
    entry: &PlanEntry,
) -> Result<Case> {
    let seed = spec.base_seed ^ id as u64;
    let wrap = |e: CoreError| CoreError::Case {
        case: id,
        source: Box::new(e),
    };
    let (tissue, exc, meta) = sampler
        .sample_rotated(geom, seed, entry.tag, entry.rotation_deg)
        .map_err(wrap)?;
    let x = simulate_tmp(geom, &tissue, exc, &spec.sim).map_err(wrap)?;
    let h = build_forward_operator(geom, entry.rotation_deg).map_err(wrap)?;
    let clean = project(&h, &x).map_err(wrap)?;
    let y = add_noise(&clean, spec.snr_db, derive_seed(seed, streams::NOISE)).map_err(wrap)?;
    Ok(Case {
        id,
        x: TmpSequence {
            values: round_f32(&x.values),
        },
        y: EcgSequence {
            values: round_f32(&y.values),
            snr_db: y.snr_db,
        },
        meta,
    })
}

/// Generates every case of `spec` in memory, in plan order.
pub fn simulate_cases(spec: &DatasetSpec) -> Result<(Geometry, Vec<Case>)> {
    spec.validate()?;
    let geom = spec.grid.build()?;
    let sampler = CaseSampler::new(&geom, spec.pools, &spec.sim)?;
    let mut cases = Vec::new();
    for entry in &spec.plan {
        for _ in 0..entry.count {
            let id = cases.len();
            cases.push(generate_case(spec, &geom, &sampler, id, entry)?);
        }
    }
    Ok((geom, cases))
}

pub fn write_case(path: &Path, case: &Case) -> Result<()> {
    let (u, t) = case.x.values.dims()?;
    let (m, ty) = case.y.values.dims()?;
    if t != ty {
        return Err(CoreError::shape(
            "write_case",
            format!("x has {t} frames, y has {ty}"),
        ));
    }
    let meta = serde_json::to_vec(&case.meta)?;
    let mut bytes = Vec::with_capacity(24 + 4 * (u + m) * t + meta.len());
    bytes.extend_from_slice(CASE_MAGIC);
    for n in [DATASET_FORMAT_VERSION, u as u32, m as u32, t as u32] {
        bytes.extend_from_slice(&n.to_le_bytes());
    }
    for v in case.x.values.data().iter().chain(case.y.values.data()) {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta);
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CoreError::Dataset("case file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// Reads one case file; `snr_db` is not stored per case and is supplied by
/// the caller.
pub fn read_case(path: &Path, id: usize, snr_db: Option<f64>) -> Result<Case> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CASE_MAGIC {
        return Err(CoreError::Dataset(format!(
            "{} is not a case file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(CoreError::Dataset(format!(
            "unsupported case version {version}"
        )));
    }
    let (u, m, t) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let x = Tensor::matrix(u, t, r.f32s(u * t)?)?;
    let y = Tensor::matrix(m, t, r.f32s(m * t)?)?;
    let len = r.u32()? as usize;
    let meta: CaseMeta = serde_json::from_slice(r.take(len)?)?;
    if r.pos != bytes.len() {
        return Err(CoreError::Dataset("trailing bytes in case file".into()));
    }
    Ok(Case {
        id,
        x: TmpSequence::new(x)?,
        y: EcgSequence { values: y, snr_db },
        meta,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    fs::write(path, json)?;
    Ok(())
}

/// Generates and writes a dataset. The manifest is written last, so a
/// directory with a manifest is complete.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    let (geom, cases) = simulate_cases(spec)?;
    fs::create_dir_all(dir.join(CASES_DIR))?;
    let mut listed = Vec::with_capacity(cases.len());
    for case in &cases {
        let file = format!("{CASES_DIR}/{}", case_file_name(case.id));
        write_case(&dir.join(&file), case)?;
        listed.push(ManifestCase {
            id: case.id,
            tag: case.meta.difficulty_tag,
            rotation_deg: case.meta.rotation_deg,
            seed: case.meta.rng_seed,
            file,
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        dims: Dims {
            u: geom.num_nodes(),
            m: geom.num_leads(),
            t: spec.sim.frames(),
        },
        spec: spec.clone(),
        cases: listed,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: Option<PathBuf>,
    pub manifest: Manifest,
    pub geometry: Geometry,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(CoreError::Dataset(format!(
                "unsupported dataset version {}",
                manifest.format_version
            )));
        }
        let snr = Some(manifest.spec.snr_db);
        let cases = manifest
            .cases
            .iter()
            .map(|c| read_case(&dir.join(&c.file), c.id, snr))
            .collect::<Result<Vec<_>>>()?;
        for c in &cases {
            let dims = (c.x.nodes(), c.y.leads(), c.x.frames());
            let want = (manifest.dims.u, manifest.dims.m, manifest.dims.t);
            if dims != want {
                return Err(CoreError::Dataset(format!(
                    "case {} has dims {dims:?}, manifest says {want:?}",
                    c.id
                )));
            }
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            geometry: manifest.spec.grid.build()?,
            manifest,
            cases,
        })
    }

    /// Generates without touching the disk.
    pub fn in_memory(spec: &DatasetSpec) -> Result<Self> {
        let (geometry, cases) = simulate_cases(spec)?;
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            dims: Dims {
                u: geometry.num_nodes(),
                m: geometry.num_leads(),
                t: spec.sim.frames(),
            },
            spec: spec.clone(),
            cases: cases
                .iter()
                .map(|c| ManifestCase {
                    id: c.id,
                    tag: c.meta.difficulty_tag,
                    rotation_deg: c.meta.rotation_deg,
                    seed: c.meta.rng_seed,
                    file: format!("{CASES_DIR}/{}", case_file_name(c.id)),
                })
                .collect(),
        };
        Ok(Self {
            dir: None,
            manifest,
            geometry,
            cases,
        })
    }

    pub fn split(&self, tag: DifficultyTag) -> Vec<&Case> {
        self.cases
            .iter()
            .filter(|c| c.meta.difficulty_tag == tag)
            .collect()
    }

    /// Distinct split tags in order of first appearance.
    pub fn tags(&self) -> Vec<DifficultyTag> {
        let mut tags = Vec::new();
        for c in &self.cases {
            if !tags.contains(&c.meta.difficulty_tag) {
                tags.push(c.meta.difficulty_tag);
            }
        }
        tags
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = &self.manifest.dims;
        (d.u, d.m, d.t)
    }
}

impl TissueMap {
    pub fn from_meta(geom: &Geometry, meta: &CaseMeta, sim: &SimConfig) -> Result<Self> {
        TissueMap::with_scar(
            geom,
            meta.scar_center,
            meta.scar_radius,
            sim.a_healthy,
            sim.a_scar,
        )
    }
}
