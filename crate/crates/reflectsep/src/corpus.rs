//! Synthesized corpus export: `pairs/NNNNN_{y,t,r}.png` and `manifest.tsv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use reflectsep_core::imaging::Image;
use reflectsep_core::rng::RandomState;
use reflectsep_core::synthesis::{build_pair, prepare, Augment, KindSet, SynthParams};

use crate::error::{Error, Result};
use crate::io::{create_dir, save_image};

pub const MANIFEST_HEADER: &str =
    "index\tkind\tw\tsigma\tghost_dx\tghost_dy\tghost_alpha\tt_file\tr_file";

/// Source images of one scene category with their file names.
pub struct Pool {
    pub files: Vec<PathBuf>,
    pub images: Vec<Image>,
}

impl Pool {
    pub fn new(files: Vec<PathBuf>, images: &[Image]) -> Result<Self> {
        let images = images
            .iter()
            .map(prepare)
            .collect::<reflectsep_core::Result<_>>()?;
        Ok(Self { files, images })
    }

    fn name(&self, index: usize) -> String {
        self.files[index]
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

fn manifest_row(index: usize, p: &SynthParams, t_file: &str, r_file: &str) -> String {
    format!(
        "{index}\t{}\t{}\t{}\t{}\t{}\t{}\t{t_file}\t{r_file}",
        p.kind, p.w, p.sigma, p.ghost_dx, p.ghost_dy, p.ghost_alpha
    )
}

/// Writes `n` pairs drawn exactly as `build_batch(…, n, aug, RandomState::new(seed))`
/// would, one at a time. Returns the manifest text.
pub fn export_corpus(
    t: &Pool,
    r: &Pool,
    kinds: KindSet,
    n: usize,
    seed: u64,
    aug: Augment,
    out: &Path,
) -> Result<String> {
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let pairs_dir = out.join("pairs");
    create_dir(&pairs_dir)?;
    let base = RandomState::new(seed).next_u64();
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for i in 0..n {
        let pair = build_pair(
            &t.images,
            &r.images,
            kinds,
            aug,
            &mut RandomState::derive(base, i as u64),
        )?;
        let params = pair.params.expect("supervised pairs carry parameters");
        for (tag, img) in [("y", &pair.y), ("t", &pair.t), ("r", &pair.r)] {
            save_image(img, &pairs_dir.join(format!("{i:05}_{tag}.png")))?;
        }
        let row = manifest_row(i, &params, &t.name(pair.source.0), &r.name(pair.source.1));
        writeln!(manifest, "{row}").expect("string write");
    }
    let path = out.join("manifest.tsv");
    fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
