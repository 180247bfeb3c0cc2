//! Stack-attention maps as CSV and 8-bit PGM, plus the most likely action
//! at every position.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Real, Tape, Tensor};
use crate::stack::{ActionDistribution, StackOp};

/// One row per position `i`, one column per attended position `n`.
pub fn alphas_csv<F: Real>(alphas: &Tensor<F>) -> String {
    let mut out = String::new();
    for i in 0..alphas.rows() {
        let row: Vec<String> = alphas.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Binary graymap with pixel value `round(255·α)`.
pub fn alphas_pgm<F: Real>(alphas: &Tensor<F>) -> Vec<u8> {
    let (h, w) = (alphas.rows(), alphas.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        alphas
            .data()
            .iter()
            .map(|v| (255.0 * v.f64()).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Most likely action at positions `1..T` (row 0 belongs to [BOS]).
pub fn argmax_actions<F: Real>(actions: &Tensor<F>) -> Vec<StackOp> {
    (1..actions.rows())
        .map(|i| {
            let r = actions.row(i);
            ActionDistribution::<F>::new(r[0], r[1], r[2])
                .map(|a| a.argmax())
                .unwrap_or(StackOp::NoOp)
        })
        .collect()
}

/// Writes `layer{l}.csv` and `layer{l}.pgm` for every stack layer and an
/// `actions.txt` with one line per layer. Returns the written paths.
pub fn dump_attention(model: &Model, tokens: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    if !model.config().stack {
        return Err(Error::Config("model has no stack sublayer to export".into()));
    }
    fs::create_dir_all(dir)?;
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let trace = model.forward(&mut tape, &vars, tokens)?;
    let mut written = Vec::new();
    let mut actions_txt = format!("# {}\n", model.vocab().decode(tokens).join(" "));
    for (l, layer) in trace.layers.iter().enumerate() {
        let (Some(alphas), Some(actions)) = (layer.alphas, layer.actions) else {
            continue;
        };
        let alphas = tape.value(alphas);
        let csv = dir.join(format!("layer{l}.csv"));
        fs::write(&csv, alphas_csv(alphas))?;
        let pgm = dir.join(format!("layer{l}.pgm"));
        fs::write(&pgm, alphas_pgm(alphas))?;
        written.extend([csv, pgm]);
        let names: Vec<String> = argmax_actions(tape.value(actions)).iter().map(|a| a.to_string()).collect();
        let _ = writeln!(actions_txt, "layer{l}\t{}", names.join(" "));
    }
    let path = dir.join("actions.txt");
    fs::write(&path, actions_txt)?;
    written.push(path);
    Ok(written)
}
