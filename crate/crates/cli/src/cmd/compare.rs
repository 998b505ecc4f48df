use std::fmt::Write as _;
use std::path::Path;

use pointplanes::experiment::{compare, CompareCell, CompareConfig, Method};
use serde::{Deserialize, Serialize};

use super::Precision;
use crate::error::Result;
use crate::io::{prepare_out, read_json, record_config, round6, with_path, write_json};

pub const GRID_JSON: &str = "grid.json";
pub const GRID_TEXT: &str = "grid.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRun {
    #[serde(default)]
    pub dtype: Precision,
    pub compare: CompareConfig,
}

/// One line per noise level and density, one column pair per method.
pub fn grid_text(cells: &[CompareCell]) -> String {
    let mut s = format!("{:>8} {:>8}", "sigma", "density");
    for m in Method::ALL {
        let _ = write!(s, " {:>20} {:>10}", format!("{}_psnr", m.name()), "ssim");
    }
    s.push('\n');
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.depth_sigma, c.density)) {
            keys.push((c.depth_sigma, c.density));
        }
    }
    for (sigma, density) in keys {
        let _ = write!(s, "{sigma:>8.4} {density:>8.4}");
        for m in Method::ALL {
            match cells
                .iter()
                .find(|c| c.depth_sigma == sigma && c.density == density && c.method == m)
            {
                Some(c) => {
                    let _ = write!(s, " {:>20.6} {:>10.6}", c.psnr, c.ssim);
                }
                None => {
                    let _ = write!(s, " {:>20} {:>10}", "-", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn run(config: &Path, out: &Path, force: bool) -> Result<()> {
    let cfg: CompareRun = read_json(config)?;
    cfg.compare.train.validate()?;
    prepare_out(out, force)?;
    record_config(out, &cfg)?;
    let mut cells = match cfg.dtype {
        Precision::F32 => compare::<f32>(&cfg.compare)?,
        Precision::F64 => compare::<f64>(&cfg.compare)?,
    };
    for c in &mut cells {
        c.psnr = round6(c.psnr);
        c.ssim = round6(c.ssim);
    }
    write_json(&out.join(GRID_JSON), &cells)?;
    let text = grid_text(&cells);
    with_path(&out.join(GRID_TEXT), std::fs::write(out.join(GRID_TEXT), &text))?;
    print!("{text}");
    Ok(())
}
