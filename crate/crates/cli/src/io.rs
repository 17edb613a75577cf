//! Run-directory file access. Every error names the offending path.

use std::fs;
use std::path::{Path, PathBuf};

use vpc_core::imageio::{decode_pgm_mask, decode_pnm, encode_pgm_mask, encode_pnm};
use vpc_core::interflow::{read_flo, write_flo};
use vpc_core::synth::Annotations;
use vpc_core::{Direction, FlowField, Frame, Mask};

use crate::error::{CliError, CliResult};

pub fn indexed(dir: &Path, t: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{t:06}{suffix}"))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_frame(path: &Path, frame: &Frame) -> CliResult<()> {
    write_bytes(path, &encode_pnm(frame))
}

pub fn write_mask(path: &Path, mask: &Mask) -> CliResult<()> {
    write_bytes(path, &encode_pgm_mask(mask))
}

pub fn write_flow(path: &Path, flow: &FlowField) -> CliResult<()> {
    let bytes = write_flo(flow).map_err(|e| CliError::at(path, e))?;
    write_bytes(path, &bytes)
}

pub fn read_flow(path: &Path, direction: Direction) -> CliResult<FlowField> {
    read_flo(&read_bytes(path)?, direction).map_err(|e| CliError::at(path, e))
}

pub fn read_mask(path: &Path) -> CliResult<Mask> {
    decode_pgm_mask(&read_bytes(path)?).map_err(|e| CliError::at(path, e))
}

/// All `.ppm` / `.pgm` files of `dir` in name order.
pub fn read_frames(dir: &Path) -> CliResult<Vec<Frame>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|s| s.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no .ppm or .pgm frames", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| decode_pnm(&read_bytes(p)?).map_err(|e| CliError::at(p, e)))
        .collect::<CliResult<Vec<_>>>()?;
    let dims = frames[0].dims();
    if let Some((p, f)) = paths.iter().zip(&frames).find(|(_, f)| f.dims() != dims) {
        return Err(CliError::Data(format!(
            "{}: frame is {:?}, expected {:?}",
            p.display(),
            f.dims(),
            dims
        )));
    }
    Ok(frames)
}

/// Flows `dir/%06d{suffix}` for `t in 0..count`.
pub fn read_flow_seq(dir: &Path, suffix: &str, count: usize, direction: Direction) -> CliResult<Vec<FlowField>> {
    (0..count)
        .map(|t| read_flow(&indexed(dir, t, suffix), direction))
        .collect()
}

pub fn write_flow_seq(dir: &Path, suffix: &str, flows: &[FlowField]) -> CliResult<()> {
    flows
        .iter()
        .enumerate()
        .try_for_each(|(t, f)| write_flow(&indexed(dir, t, suffix), f))
}

pub fn write_frame_seq(dir: &Path, frames: &[Frame]) -> CliResult<()> {
    frames
        .iter()
        .enumerate()
        .try_for_each(|(t, f)| write_frame(&indexed(dir, t, ".ppm"), f))
}

pub fn read_annotations(path: &Path) -> CliResult<Annotations> {
    Annotations::from_text(&read_text(path)?).map_err(|e| CliError::at(path, e))
}

pub fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: missing input directory", path.display())))
    }
}
