//! Parameter files: a flat little-endian f64 stream plus a JSON sidecar
//! naming the blocks and their shapes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::craft::{detect_kind, CraftedModule, Insertion, ModuleKind};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::models::{BlockLayout, BlockSpec, LocalModel};

pub const STREAM_FORMAT: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub blocks: Vec<BlockSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ModuleKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion: Option<Insertion>,
}

/// `model.bin` → `model.json`.
pub fn sidecar_path(stream: &Path) -> PathBuf {
    stream.with_extension("json")
}

fn write_stream(path: &Path, sidecar: &Sidecar, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

/// Reads the stream and its sidecar, checking that the byte count matches
/// the declared shapes.
pub fn read_stream(path: &Path) -> Result<(Sidecar, Vec<f64>)> {
    let name = path.display().to_string();
    let side = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)
        .map_err(|e| Error::format(side.display().to_string(), e.to_string()))?;
    if sidecar.format != STREAM_FORMAT {
        return Err(Error::format(
            &name,
            format!("unsupported stream format {:?}", sidecar.format),
        ));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(
            &name,
            format!("length {} is not a multiple of 8", bytes.len()),
        ));
    }
    let layout = BlockLayout {
        blocks: sidecar.blocks.clone(),
    };
    if bytes.len() / 8 != layout.total_len() {
        return Err(Error::format(
            &name,
            format!(
                "{} values but the sidecar declares {}",
                bytes.len() / 8,
                layout.total_len()
            ),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((sidecar, values))
}

pub fn save_blocks(
    path: &Path,
    blocks: &[(&str, &Matrix)],
    kind: Option<ModuleKind>,
    insertion: Option<Insertion>,
) -> Result<()> {
    let sidecar = Sidecar {
        format: STREAM_FORMAT.into(),
        blocks: blocks
            .iter()
            .map(|(n, m)| BlockSpec {
                name: n.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        kind,
        insertion,
    };
    let values: Vec<f64> = blocks.iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
    write_stream(path, &sidecar, &values)
}

pub fn load_blocks(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let (sidecar, values) = read_stream(path)?;
    let layout = BlockLayout { blocks: sidecar.blocks };
    layout
        .blocks
        .iter()
        .map(|b| Ok((b.name.clone(), layout.matrix(&values, &b.name)?)))
        .collect()
}

pub fn save_model<M: LocalModel>(path: &Path, model: &M) -> Result<()> {
    let blocks = model.blocks();
    let named: Vec<(&str, &Matrix)> = blocks.iter().map(|b| (b.name.as_str(), &b.value)).collect();
    let kind = model.crafted().map(|c| c.kind);
    let insertion = model.crafted().map(|c| c.insertion);
    save_blocks(path, &named, kind, insertion)
}

/// Loads parameters into `model`; the file's layout must match exactly.
pub fn load_model_params<M: LocalModel>(path: &Path, model: &mut M) -> Result<()> {
    let (sidecar, values) = read_stream(path)?;
    if sidecar.blocks != model.layout().blocks {
        return Err(Error::Shape(format!(
            "{} does not match the model layout",
            path.display()
        )));
    }
    model.set_flat_params(&values)
}

pub fn save_module(path: &Path, module: &CraftedModule) -> Result<()> {
    save_blocks(path, &module.named_blocks(), Some(module.kind), Some(module.insertion))
}

pub fn load_module(path: &Path) -> Result<CraftedModule> {
    let (sidecar, values) = read_stream(path)?;
    let layout = BlockLayout {
        blocks: sidecar.blocks.clone(),
    };
    let get = |n: &str| layout.matrix(&values, n);
    let (w1, b1, w2, b2) = (
        get("crafted.w1")?,
        get("crafted.b1")?,
        get("crafted.w2")?,
        get("crafted.b2")?,
    );
    let kind = match sidecar.kind.or_else(|| detect_kind(&w1, &b1, &w2)) {
        Some(k) => k,
        None => {
            return Err(Error::format(
                path.display().to_string(),
                "no crafted module pattern found",
            ))
        }
    };
    Ok(CraftedModule {
        w1,
        b1,
        w2,
        b2,
        kind,
        insertion: sidecar.insertion.unwrap_or(Insertion::ImageFront),
    })
}

/// Writes a flat vector (e.g. an aggregate) under a model layout.
pub fn save_vector(path: &Path, layout: &BlockLayout, values: &[f64]) -> Result<()> {
    if values.len() != layout.total_len() {
        return Err(Error::Shape(format!(
            "vector of {} values for a layout of {}",
            values.len(),
            layout.total_len()
        )));
    }
    let sidecar = Sidecar {
        format: STREAM_FORMAT.into(),
        blocks: layout.blocks.clone(),
        kind: None,
        insertion: None,
    };
    write_stream(path, &sidecar, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    pub blocks: Vec<BlockSpec>,
    pub kind: Option<ModuleKind>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    /// `−b1`, i.e. the bin edges for a linear-leakage block.
    pub bins: Option<Vec<f64>>,
}

/// Detection runs on the values; the sidecar's `kind` tag is ignored.
pub fn inspect(path: &Path) -> Result<Inspection> {
    let (sidecar, values) = read_stream(path)?;
    let layout = BlockLayout {
        blocks: sidecar.blocks.clone(),
    };
    let mut out = Inspection {
        blocks: sidecar.blocks.clone(),
        kind: None,
        k: None,
        d: None,
        bins: None,
    };
    let has = |n: &str| layout.locate(n).is_some();
    if has("crafted.w1") && has("crafted.b1") && has("crafted.w2") {
        let w1 = layout.matrix(&values, "crafted.w1")?;
        let b1 = layout.matrix(&values, "crafted.b1")?;
        let w2 = layout.matrix(&values, "crafted.w2")?;
        out.kind = detect_kind(&w1, &b1, &w2);
        if out.kind.is_some() {
            out.k = Some(w1.rows());
            out.d = Some(w1.cols());
        }
        if out.kind == Some(ModuleKind::LinearLeakage) {
            out.bins = Some(b1.data().iter().map(|v| -v).collect());
        }
    }
    Ok(out)
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "blocks:")?;
        for b in &self.blocks {
            writeln!(f, "  {:<16} {} x {}", b.name, b.rows, b.cols)?;
        }
        match (self.kind, self.k, self.d) {
            (Some(kind), Some(k), Some(d)) => writeln!(f, "kind: {}, k={k}, d={d}", kind.as_str())?,
            _ => writeln!(f, "kind: none detected")?,
        }
        if let Some(bins) = &self.bins {
            let shown: Vec<String> = bins.iter().take(8).map(|v| format!("{v:.6}")).collect();
            let more = if bins.len() > 8 { ", ..." } else { "" };
            writeln!(f, "bins: [{}{more}]", shown.join(", "))?;
        }
        Ok(())
    }
}
