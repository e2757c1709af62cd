//! Output directory bookkeeping: atomic file writes, and removal of
//! everything a failed command created.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use cpcseg::data::write_atomic;
use cpcseg::Result;

pub struct Outputs {
    dir: PathBuf,
    created: bool,
    before: BTreeSet<OsString>,
}

fn listing(dir: &Path) -> Result<BTreeSet<OsString>> {
    Ok(fs::read_dir(dir)?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?)
}

impl Outputs {
    pub fn open(dir: &Path) -> Result<Self> {
        let created = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created,
            before: listing(dir)?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Removes entries that did not exist when the directory was opened.
    pub fn discard(self) {
        if self.created {
            let _ = fs::remove_dir_all(&self.dir);
            return;
        }
        let Ok(now) = listing(&self.dir) else { return };
        for name in now.difference(&self.before) {
            let p = self.dir.join(name);
            let _ = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discard_keeps_what_was_already_there() {
        let tmp = tempfile::TempDir::new().unwrap();
        let dir = tmp.path().join("out");
        fs::create_dir(&dir).unwrap();
        fs::write(dir.join("old.txt"), "x").unwrap();
        let mut out = Outputs::open(&dir).unwrap();
        out.write("new.txt", b"y").unwrap();
        fs::create_dir(dir.join("sub")).unwrap();
        out.discard();
        assert_eq!(listing(&dir).unwrap(), BTreeSet::from([OsString::from("old.txt")]));

        let fresh = tmp.path().join("fresh");
        let mut out = Outputs::open(&fresh).unwrap();
        out.write_json("a.json", &[1, 2]).unwrap();
        assert_eq!(fs::read_to_string(fresh.join("a.json")).unwrap(), "[\n  1,\n  2\n]\n");
        out.discard();
        assert!(!fresh.exists());
    }
}
