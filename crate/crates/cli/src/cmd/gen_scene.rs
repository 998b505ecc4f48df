use std::path::Path;

use pointplanes::experiment::{Benchmark, BenchmarkConfig};
use pointplanes::synth::NoiseSpec;

use crate::error::{CliError, Result};
use crate::io::{prepare_out, read_json, record_config, with_path, write_json};
use crate::scene::{view_stem, write_cameras, Split, CLOUD_FILE, SPEC_FILE, SPLIT_FILE, VIEWS_DIR};

pub const DEFAULT_POINTS_PER_VIEW: usize = 1000;

fn canned(id: &str) -> BenchmarkConfig {
    BenchmarkConfig {
        scene: Some(id.to_owned()),
        spec: None,
        resolution: [64, 64],
        points_per_view: DEFAULT_POINTS_PER_VIEW,
        noise: NoiseSpec::default(),
        held_out: Vec::new(),
        sample_seed: 0,
    }
}

pub fn run(config: Option<&Path>, scene: Option<&str>, out: &Path, force: bool) -> Result<()> {
    let cfg = match (config, scene) {
        (Some(path), None) => read_json::<BenchmarkConfig>(path)?,
        (None, Some(id)) => canned(id),
        _ => return Err(CliError::Usage("give either a config file or --scene".into())),
    };
    let bench = Benchmark::prepare(&cfg)?;
    prepare_out(out, force)?;
    record_config(out, &cfg)?;
    bench.spec.save(&out.join(SPEC_FILE))?;
    write_cameras(out, &bench.spec.cameras)?;
    let n = bench.spec.cameras.len();
    let split = Split {
        train: (0..n).filter(|i| !cfg.held_out.contains(i)).collect(),
        held_out: cfg.held_out.clone(),
    };
    write_json(&out.join(SPLIT_FILE), &split)?;
    bench.cloud.save_ply(&out.join(CLOUD_FILE))?;

    let views = out.join(VIEWS_DIR);
    with_path(&views, std::fs::create_dir_all(&views))?;
    let mut train = bench.train.targets.iter();
    let mut test = bench.test_targets.iter();
    for i in 0..n {
        let image = if cfg.held_out.contains(&i) {
            test.next()
        } else {
            train.next()
        }
        .expect("one target per camera");
        image.save_png(&views.join(format!("{}.png", view_stem(i))))?;
        image.save_pfm(&views.join(format!("{}.pfm", view_stem(i))))?;
    }
    println!(
        "wrote {n} views ({} held out) and {} points to {}",
        split.held_out.len(),
        bench.cloud.len(),
        out.display()
    );
    Ok(())
}
