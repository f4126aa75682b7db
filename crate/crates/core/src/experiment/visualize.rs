use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::backbone::{ForwardOptions, TitModel, Variant, WindowBatch};
use crate::blocks::AttentionRecord;
use crate::envs::{EnvKind, ObservationHistory};
use crate::error::{Result, TitError};
use crate::training::{derive_seed, greedy_actions};

/// Exported images are upscaled so their longer side is at least this many
/// pixels.
const MIN_IMAGE_SIDE: usize = 64;

/// Writes an 8-bit grayscale PNG of `grid` (rows of equal length), min-max
/// scaled to 0..=255. A constant map becomes all zeros.
pub fn write_heatmap_png(path: &Path, grid: &[Vec<f64>]) -> Result<()> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Err(TitError::EmptyContext { op: "heatmap" });
    }
    let (lo, hi) = grid
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let scale = MIN_IMAGE_SIDE.div_ceil(rows.max(cols)).max(1);
    let (h, w) = (rows * scale, cols * scale);
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = grid[y / scale][x / scale];
            let level = if hi > lo {
                (v - lo) / (hi - lo) * 255.0
            } else {
                0.0
            };
            pixels.push(level.round() as u8);
        }
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

fn png_err(e: png::EncodingError) -> TitError {
    match e {
        png::EncodingError::IoError(io) => TitError::Io(io),
        other => TitError::Format(other.to_string()),
    }
}

/// Class-token attention over the patches of one inner map, as
/// `key,row,col,weight` rows. Key 0 is the class token itself (no grid
/// position), so the weights sum to one.
fn write_inner_csv(path: &Path, weights: &[f64], grid_cols: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "row", "col", "weight"])?;
    for (key, v) in weights.iter().enumerate() {
        let (row, col) = if key == 0 {
            (String::new(), String::new())
        } else {
            (
                ((key - 1) / grid_cols).to_string(),
                ((key - 1) % grid_cols).to_string(),
            )
        };
        w.write_record([key.to_string(), row, col, v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A square attention matrix with a `q,k0,k1,..` header.
fn write_matrix_csv(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["q".to_string()];
    header.extend((0..m.first().map_or(0, |r| r.len())).map(|k| format!("k{k}")));
    w.write_record(&header)?;
    for (q, row) in m.iter().enumerate() {
        let mut rec = vec![q.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Attention artifacts of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisualizeOutput {
    pub files: Vec<PathBuf>,
    /// Inner class-query maps on the patch grid, per (block, head).
    pub inner: Vec<(usize, usize, Vec<Vec<f64>>)>,
    /// Outer `K×K` maps, per (block, head).
    pub outer: Vec<(usize, usize, Vec<Vec<f64>>)>,
}

/// Plays `warmup` greedy steps of `env` from a seeded reset, then exports
/// the attention of the policy at the resulting history window.
///
/// Inner maps are read from the newest frame. For every inner block and
/// head the class token's attention row is written as CSV and as a heat map
/// over the patch grid; for every outer block and head the full `K×K` map is
/// written likewise.
pub fn cmd_visualize(
    checkpoint: &Path,
    env: EnvKind,
    warmup: usize,
    seed: u64,
    out: &Path,
) -> Result<VisualizeOutput> {
    let model = TitModel::<f32>::load(checkpoint)?;
    let cfg = model.config().clone();
    if cfg.obs != env.obs_shape() {
        return Err(TitError::config(
            "obs_shape",
            format!(
                "checkpoint expects {}, {env} emits {}",
                cfg.obs,
                env.obs_shape()
            ),
        ));
    }
    let obs_len = cfg.obs.len();
    let k = cfg.context_len;
    let mut e = env.make(0);
    let mut hist = ObservationHistory::new(k, obs_len)?;
    hist.push(&e.reset(Some(derive_seed(seed, 0))))?;
    for _ in 0..warmup {
        let batch = WindowBatch::from_windows([&hist.window()], k, obs_len)?;
        let r = e.step(greedy_actions(&model, &batch)?[0])?;
        if r.done() {
            break;
        }
        hist.push(&r.obs)?;
    }
    let batch = WindowBatch::from_windows([&hist.window()], k, obs_len)?;
    let mut tape = Tape::new();
    let out_maps = model
        .forward(
            &mut tape,
            &batch,
            ForwardOptions {
                capture_attention: true,
                ..ForwardOptions::default()
            },
        )?
        .attention;

    fs::create_dir_all(out)?;
    let mut result = VisualizeOutput::default();
    let newest = if cfg.variant == Variant::WoOuter {
        0
    } else {
        k - 1
    };
    let (grid_rows, grid_cols) = cfg.patch_grid();
    for rec in out_maps.inner.iter().filter(|r| r.group == newest) {
        let row = &rec.weights[0];
        let grid: Vec<Vec<f64>> = (0..grid_rows)
            .map(|r| row[1 + r * grid_cols..1 + (r + 1) * grid_cols].to_vec())
            .collect();
        let stem = format!("inner_block{}_head{}", rec.block_index, rec.head_index);
        let csv_path = out.join(format!("{stem}.csv"));
        let png_path = out.join(format!("{stem}.png"));
        write_inner_csv(&csv_path, row, grid_cols)?;
        write_heatmap_png(&png_path, &grid)?;
        result.files.extend([csv_path, png_path]);
        result.inner.push((rec.block_index, rec.head_index, grid));
    }
    for AttentionRecord {
        block_index,
        head_index,
        weights,
        ..
    } in out_maps.outer.iter().filter(|r| r.group == 0)
    {
        let stem = format!("outer_block{block_index}_head{head_index}");
        let csv_path = out.join(format!("{stem}.csv"));
        let png_path = out.join(format!("{stem}.png"));
        write_matrix_csv(&csv_path, weights)?;
        write_heatmap_png(&png_path, weights)?;
        result.files.extend([csv_path, png_path]);
        result
            .outer
            .push((*block_index, *head_index, weights.clone()));
    }
    Ok(result)
}
