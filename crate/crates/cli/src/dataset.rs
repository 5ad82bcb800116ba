//! Data roots: one directory per scene, each holding `clean/` and any
//! number of captured `noisy*/` sequence directories. A directory that
//! itself holds `clean/` is a root with a single scene.

use std::fs;
use std::path::{Path, PathBuf};

use rawvid_core::io::load_sequence;
use rawvid_core::training::data::Scene;

use crate::failure::{io_failure, CliResult, Failure};

fn subdirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_failure("list", dir, e))? {
        let path = entry.map_err(|e| io_failure("list", dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Scene directories under `root`, sorted by name.
pub fn scene_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join("clean").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let scenes: Vec<PathBuf> = subdirs(root)?.into_iter().filter(|d| d.join("clean").is_dir()).collect();
    if scenes.is_empty() {
        return Err(Failure::Config(format!("data root {} holds no scene with a clean/ directory", root.display())));
    }
    Ok(scenes)
}

/// Captured noisy realizations of a scene, sorted by directory name.
pub fn noisy_dirs(scene: &Path) -> CliResult<Vec<PathBuf>> {
    Ok(subdirs(scene)?
        .into_iter()
        .filter(|d| d.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("noisy")))
        .collect())
}

pub fn load_scene(dir: &Path) -> CliResult<Scene> {
    let clean = load_sequence(&dir.join("clean"))?.normalized()?;
    let noisy = noisy_dirs(dir)?
        .iter()
        .map(|d| Ok(load_sequence(d)?.normalized()?))
        .collect::<CliResult<Vec<_>>>()?;
    let scene = Scene { clean, noisy };
    scene.validate()?;
    Ok(scene)
}

pub fn load_root(root: &Path) -> CliResult<Vec<Scene>> {
    scene_dirs(root)?.iter().map(|d| load_scene(d)).collect()
}
