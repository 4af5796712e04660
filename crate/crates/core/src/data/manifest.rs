//! Dataset manifest: one `image<TAB>annotation` pair per line, paths relative
//! to the manifest's directory. Blank lines and `#` comments are skipped.

use std::path::{Component, Path, PathBuf};

use super::{load_image, parse_voc_xml, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a manifest, resolving entries against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (img, ann) = line
                .split_once('\t')
                .or_else(|| line.trim().split_once(char::is_whitespace))
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected image and annotation", n + 1)))?;
            entries.push(ManifestEntry {
                image: base.join(img.trim()),
                annotation: base.join(ann.trim()),
            });
        }
        Ok(Self { entries })
    }

    /// Writes the manifest with entries expressed relative to its directory.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut text = String::new();
        for e in &self.entries {
            let img = relative_to(base, &e.image);
            let ann = relative_to(base, &e.annotation);
            text.push_str(&format!("{}\t{}\n", img.display(), ann.display()));
        }
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_sample(entry: &ManifestEntry) -> Result<Sample> {
        let image = load_image(&entry.image)?;
        let text = std::fs::read_to_string(&entry.annotation)
            .map_err(|e| Error::io(format!("reading {}", entry.annotation.display()), e))?;
        let annotation = parse_voc_xml(&text)?;
        Sample::new(image, annotation)
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(Self::load_sample).collect()
    }

    /// Fails if any referenced file is missing.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.image, &e.annotation] {
                if !p.is_file() {
                    return Err(Error::InvalidArgument(format!("missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn absolute(p: &Path) -> PathBuf {
    let p = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(p)
    };
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// `target` expressed relative to `base` (lexically, no symlink resolution).
pub fn relative_to(base: &Path, target: &Path) -> PathBuf {
    let (base, target) = (absolute(base), absolute(target));
    let b: Vec<_> = base.components().collect();
    let t: Vec<_> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return target;
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}
