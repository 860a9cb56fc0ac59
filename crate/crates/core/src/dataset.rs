//! On-disk dataset layout: `<root>/{shadow,shadow_free,mask}/<stem>.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, ShadowSample};

pub const SHADOW_DIR: &str = "shadow";
pub const SHADOW_FREE_DIR: &str = "shadow_free";
pub const MASK_DIR: &str = "mask";

/// PNG files in `dir` keyed by file stem, in sorted order.
pub fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Stems present in every listed directory, plus the ones missing somewhere.
pub fn match_stems(dirs: &[&Path]) -> Result<(Vec<String>, Vec<String>)> {
    let listings = dirs
        .iter()
        .map(|d| png_stems(d))
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<&String> = listings.iter().flat_map(|l| l.keys()).collect();
    all.sort();
    all.dedup();
    let (mut matched, mut unmatched) = (Vec::new(), Vec::new());
    for stem in all {
        if listings.iter().all(|l| l.contains_key(stem)) {
            matched.push(stem.clone());
        } else {
            unmatched.push(stem.clone());
        }
    }
    Ok((matched, unmatched))
}

/// Loads every matched triplet under `root`, sorted by stem. Any stem missing
/// from one of the three folders is an error.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<ShadowSample>> {
    let root = root.as_ref();
    let dirs = [
        root.join(SHADOW_DIR),
        root.join(SHADOW_FREE_DIR),
        root.join(MASK_DIR),
    ];
    let (matched, unmatched) = match_stems(&[&dirs[0], &dirs[1], &dirs[2]])?;
    if !unmatched.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "unmatched files under {}: {}",
            root.display(),
            unmatched.join(", ")
        )));
    }
    if matched.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no samples under {}",
            root.display()
        )));
    }
    matched
        .into_iter()
        .map(|stem| {
            let file = format!("{stem}.png");
            ShadowSample::new(
                Image::load(dirs[0].join(&file))?,
                Image::load(dirs[1].join(&file))?,
                Mask::load(dirs[2].join(&file))?,
                stem,
            )
        })
        .collect()
}

pub fn save_dataset(root: impl AsRef<Path>, samples: &[ShadowSample]) -> Result<()> {
    let root = root.as_ref();
    for sub in [SHADOW_DIR, SHADOW_FREE_DIR, MASK_DIR] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let file = format!("{}.png", s.id);
        s.shadow.save(root.join(SHADOW_DIR).join(&file))?;
        s.shadow_free.save(root.join(SHADOW_FREE_DIR).join(&file))?;
        s.mask.save(root.join(MASK_DIR).join(&file))?;
    }
    Ok(())
}
