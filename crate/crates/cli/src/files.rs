//! Small file helpers: edge-sequence files (`traj_id,edges`) and
//! create-with-context writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nettraj::codec::format_edges;
use nettraj::EdgeId;

use crate::error::{CliError, Result};

pub const EDGE_SEQ_HEADER: &str = "traj_id,edges";

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Runs `body` against a fresh file at `path` and flushes it.
pub fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn write_edge_seqs(path: &Path, rows: &[(String, Vec<EdgeId>)]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{EDGE_SEQ_HEADER}")?;
        for (id, edges) in rows {
            writeln!(w, "{id},{}", format_edges(edges))?;
        }
        Ok(())
    })
}

pub fn read_edge_seqs(path: &Path) -> Result<Vec<(String, Vec<EdgeId>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("traj_id")) {
            continue;
        }
        let bad = |msg: &str| CliError::Data(format!("{}:{}: {msg}", path.display(), i + 1));
        let (id, edges) = line.split_once(',').ok_or_else(|| bad("expected traj_id,edges"))?;
        let edges = edges
            .split_whitespace()
            .map(|s| s.parse().map(EdgeId).map_err(|_| bad(&format!("invalid edge id {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((id.trim().to_string(), edges));
    }
    Ok(out)
}
