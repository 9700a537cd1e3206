//! On-disk module registry.
//!
//! Layout: `<root>/manifest.json` plus `<root>/modules/<id>.moma`. The
//! manifest is the commit point: a module exists once the manifest that
//! names it has been renamed into place. Files are always written to a
//! temporary name, synced and renamed, so an interrupted writer leaves at
//! worst an unreferenced file behind, which [`Hub::open`] sweeps up.

pub mod format;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Fingerprint, Head, Module, ModuleKind};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODULES_DIR: &str = "modules";
pub const MANIFEST_VERSION: u32 = 1;
const TMP_SUFFIX: &str = ".tmp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task_name: String,
    pub kind: ModuleKind,
    pub config_fingerprint: Fingerprint,
    pub file_name: String,
    pub created_from_seed: u64,
    pub train_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HubManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl HubManifest {
    fn empty() -> Self {
        HubManifest {
            version: MANIFEST_VERSION,
            entries: Vec::new(),
        }
    }
}

/// Result of a consistency check. Clean means every manifest entry loads
/// and matches, and the modules directory holds nothing else.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FsckReport {
    pub entries_checked: usize,
    pub problems: Vec<String>,
    pub orphans: Vec<String>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty() && self.orphans.is_empty()
    }
}

/// Checks that `id` is usable as a file stem.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidModule(format!(
            "id `{id}` must be 1-128 chars of [A-Za-z0-9._-] and not start with '.'"
        )))
    }
}

/// Deterministic id derived from task name, kind and parameter bytes.
pub fn content_id(module: &Module) -> String {
    let mut hasher = Sha256::new();
    hasher.update(module.fingerprint().0);
    for p in module.params() {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let stem: String = module
        .meta
        .task_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    let stem = if stem.is_empty() { "module".to_string() } else { stem };
    format!("{stem}-{}-{}", module.kind(), &hex::encode(digest)[..12])
}

pub fn write_module_file(path: &Path, module: &Module, head: Option<&Head>) -> Result<()> {
    let bytes = format::encode(module, head)?;
    let tmp = tmp_path(path);
    write_synced(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_module_file(path: &Path) -> Result<(Module, Option<Head>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    format::decode(&bytes)
}

fn tmp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}{TMP_SUFFIX}"))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

fn sync_dir(dir: &Path) {
    // Not every platform allows opening a directory for syncing.
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Where an interrupted write stops. Used to exercise crash recovery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Halt(pub usize);

/// Steps of [`Hub::add`]; halting at `n` leaves the first `n` states reached.
pub const ADD_STEPS: usize = 6;
/// Steps of [`Hub::remove`].
pub const REMOVE_STEPS: usize = 4;

#[derive(Debug)]
pub struct Hub {
    root: PathBuf,
    manifest: HubManifest,
}

impl Hub {
    /// Creates an empty hub at `root`.
    pub fn init(root: impl AsRef<Path>) -> Result<Hub> {
        let root = root.as_ref().to_path_buf();
        if root.join(MANIFEST_FILE).exists() {
            return Err(Error::AlreadyExists(root));
        }
        fs::create_dir_all(root.join(MODULES_DIR))?;
        let hub = Hub {
            root,
            manifest: HubManifest::empty(),
        };
        hub.commit_manifest(&hub.manifest, None)?;
        Ok(hub)
    }

    /// Opens a hub for writing and removes leftovers of interrupted writes.
    pub fn open(root: impl AsRef<Path>) -> Result<Hub> {
        let hub = Hub::open_read_only(root)?;
        hub.recover()?;
        Ok(hub)
    }

    /// Opens a hub without touching the directory.
    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Hub> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("no hub at {}", root.display())),
            _ => Error::Io(e),
        })?;
        let manifest: HubManifest =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Corrupt(format!("unsupported manifest version {}", manifest.version)));
        }
        let mut seen = BTreeSet::new();
        for e in &manifest.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Corrupt(format!("manifest lists `{}` twice", e.id)));
            }
        }
        Ok(Hub { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &HubManifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.manifest.entries.iter().any(|e| e.id == id)
    }

    fn module_path(&self, file_name: &str) -> PathBuf {
        self.root.join(MODULES_DIR).join(file_name)
    }

    /// Stores `module` with its head; an empty `meta.id` gets
    /// [`content_id`]. Returns the id.
    pub fn add(&mut self, module: &Module, head: &Head) -> Result<String> {
        self.add_halting(module, head, None)
    }

    /// Like [`Hub::add`] but stops after `halt` steps, simulating a crash.
    #[doc(hidden)]
    pub fn add_halting(&mut self, module: &Module, head: &Head, halt: Option<Halt>) -> Result<String> {
        let mut module = module.clone();
        if module.meta.id.is_empty() {
            module.meta.id = content_id(&module);
        }
        let id = module.meta.id.clone();
        validate_id(&id)?;
        if head.weights.len() != module.config().embed_dim {
            return Err(Error::InvalidModule(format!(
                "head width {} does not match embed_dim {}",
                head.weights.len(),
                module.config().embed_dim
            )));
        }
        if self.contains(&id) {
            return Err(Error::DuplicateId(id));
        }

        let stop = |step: usize| -> Result<()> {
            match halt {
                Some(Halt(h)) if h == step => Err(Error::Interrupted(step)),
                _ => Ok(()),
            }
        };
        stop(0)?;
        let file_name = format!("{id}.moma");
        let final_path = self.module_path(&file_name);
        let tmp = tmp_path(&final_path);
        let bytes = format::encode(&module, Some(head))?;
        if halt == Some(Halt(1)) {
            write_synced(&tmp, &bytes[..bytes.len() / 2])?;
            return Err(Error::Interrupted(1));
        }
        write_synced(&tmp, &bytes)?;
        stop(2)?;
        fs::rename(&tmp, &final_path)?;
        sync_dir(&self.root.join(MODULES_DIR));
        stop(3)?;

        let mut next = self.manifest.clone();
        next.entries.push(ManifestEntry {
            id: id.clone(),
            task_name: module.meta.task_name.clone(),
            kind: module.kind(),
            config_fingerprint: module.fingerprint(),
            file_name,
            created_from_seed: module.meta.created_from_seed,
            train_mae: module.meta.train_mae,
        });
        self.commit_manifest(&next, halt.map(|Halt(h)| h.wrapping_sub(3)))?;
        self.manifest = next;
        Ok(id)
    }

    /// Writes the manifest through a temp file. `halt` counts sub-steps:
    /// 1 = temp half written, 2 = temp written, not renamed.
    fn commit_manifest(&self, manifest: &HubManifest, halt: Option<usize>) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let tmp = tmp_path(&path);
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        if halt == Some(1) {
            write_synced(&tmp, &text.as_bytes()[..text.len() / 2])?;
            return Err(Error::Interrupted(1));
        }
        write_synced(&tmp, text.as_bytes())?;
        if halt == Some(2) {
            return Err(Error::Interrupted(2));
        }
        fs::rename(&tmp, &path)?;
        sync_dir(&self.root);
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<(Module, Head)> {
        let entry = self
            .manifest
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("module `{id}`")))?;
        self.load_entry(entry)
    }

    fn load_entry(&self, entry: &ManifestEntry) -> Result<(Module, Head)> {
        let path = self.module_path(&entry.file_name);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Corrupt(format!("module file {} is missing", path.display()))
            }
            _ => Error::Io(e),
        })?;
        let (module, head) = format::decode(&bytes)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", entry.file_name)))?;
        if module.meta.id != entry.id
            || module.kind() != entry.kind
            || module.fingerprint() != entry.config_fingerprint
        {
            return Err(Error::Corrupt(format!(
                "{} disagrees with its manifest entry",
                entry.file_name
            )));
        }
        let head = head.ok_or_else(|| Error::Corrupt(format!("{} has no head", entry.file_name)))?;
        Ok((module, head))
    }

    /// Every module of `kind`, in manifest order.
    pub fn load_kind(&self, kind: ModuleKind) -> Result<Vec<Module>> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| self.load_entry(e).map(|(m, _)| m))
            .collect()
    }

    pub fn remove(&mut self, id: &str) -> Result<()> {
        self.remove_halting(id, None)
    }

    #[doc(hidden)]
    pub fn remove_halting(&mut self, id: &str, halt: Option<Halt>) -> Result<()> {
        let pos = self
            .manifest
            .entries
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("module `{id}`")))?;
        if halt == Some(Halt(0)) {
            return Err(Error::Interrupted(0));
        }
        let mut next = self.manifest.clone();
        let entry = next.entries.remove(pos);
        self.commit_manifest(&next, halt.map(|Halt(h)| h))?;
        self.manifest = next;
        if halt == Some(Halt(3)) {
            return Err(Error::Interrupted(3));
        }
        match fs::remove_file(self.module_path(&entry.file_name)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn stray_files(&self) -> Result<Vec<PathBuf>> {
        let referenced: BTreeSet<&str> =
            self.manifest.entries.iter().map(|e| e.file_name.as_str()).collect();
        let mut stray = Vec::new();
        let dir = self.root.join(MODULES_DIR);
        if dir.exists() {
            for item in fs::read_dir(&dir)? {
                let item = item?;
                let name = item.file_name().to_string_lossy().into_owned();
                if !referenced.contains(name.as_str()) {
                    stray.push(item.path());
                }
            }
        }
        let manifest_tmp = tmp_path(&self.root.join(MANIFEST_FILE));
        if manifest_tmp.exists() {
            stray.push(manifest_tmp);
        }
        stray.sort();
        Ok(stray)
    }

    fn recover(&self) -> Result<()> {
        for path in self.stray_files()? {
            if path.is_dir() {
                continue;
            }
            log::warn!("removing leftover {}", path.display());
            fs::remove_file(&path)?;
        }
        Ok(())
    }

    pub fn fsck(&self) -> Result<FsckReport> {
        let mut report = FsckReport::default();
        for entry in &self.manifest.entries {
            report.entries_checked += 1;
            if let Err(e) = validate_id(&entry.id) {
                report.problems.push(e.to_string());
            }
            if let Err(e) = self.load_entry(entry) {
                report.problems.push(format!("{}: {e}", entry.id));
            }
        }
        report.orphans = self
            .stray_files()?
            .into_iter()
            .map(|p| p.display().to_string())
            .collect();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_backbone, EncoderConfig};

    fn module(seed: u64, id: &str) -> (Module, Head) {
        let mut m = init_backbone(&EncoderConfig::new(3, vec![4], 2), seed).unwrap();
        m.meta.id = id.into();
        m.meta.task_name = format!("task {seed}");
        (m, Head { weights: vec![1.0, 2.0], bias: 0.5 })
    }

    #[test]
    fn init_list_add() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("hub");
        let hub = Hub::init(&root).unwrap();
        assert!(hub.is_empty());
        assert!(matches!(Hub::init(&root), Err(Error::AlreadyExists(_))));
        let mut hub = Hub::open(&root).unwrap();
        let (m, h) = module(1, "a");
        hub.add(&m, &h).unwrap();
        assert_eq!(Hub::open_read_only(&root).unwrap().len(), 1);
    }

    #[test]
    fn add_load_remove_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut hub = Hub::init(dir.path()).unwrap();
        let (m, h) = module(1, "a");
        assert_eq!(hub.add(&m, &h).unwrap(), "a");
        let (back, head) = hub.load("a").unwrap();
        assert_eq!(back, m);
        assert_eq!(head, h);
        assert!(matches!(hub.add(&m, &h), Err(Error::DuplicateId(id)) if id == "a"));
        assert!(matches!(hub.load("zzz"), Err(Error::NotFound(_))));
        hub.remove("a").unwrap();
        assert!(matches!(hub.load("a"), Err(Error::NotFound(_))));
        assert!(matches!(hub.remove("a"), Err(Error::NotFound(_))));
        hub.add(&m, &h).unwrap();
        assert!(hub.fsck().unwrap().is_clean());
    }

    #[test]
    fn generated_ids_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let mut hub = Hub::init(dir.path()).unwrap();
        let (m, h) = module(4, "");
        let id = hub.add(&m, &h).unwrap();
        assert!(id.starts_with("task_4-full-"), "{id}");
        assert_eq!(id, content_id(&m));
        assert!(matches!(hub.add(&m, &h), Err(Error::DuplicateId(_))));
        let (bad, h) = module(5, "../escape");
        assert!(matches!(hub.add(&bad, &h), Err(Error::InvalidModule(_))));
    }

    #[test]
    fn flipped_payload_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut hub = Hub::init(dir.path()).unwrap();
        let (m, h) = module(1, "a");
        hub.add(&m, &h).unwrap();
        let path = dir.path().join(MODULES_DIR).join("a.moma");
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(hub.load("a"), Err(Error::Corrupt(_))));
        assert!(!hub.fsck().unwrap().is_clean());
    }

    #[test]
    fn interrupted_writes_recover_to_prior_state() {
        for step in 0..ADD_STEPS {
            let dir = tempfile::tempdir().unwrap();
            let mut hub = Hub::init(dir.path()).unwrap();
            let (m0, h0) = module(0, "keep");
            hub.add(&m0, &h0).unwrap();
            let (m1, h1) = module(1, "new");
            let err = hub.add_halting(&m1, &h1, Some(Halt(step))).unwrap_err();
            assert!(matches!(err, Error::Interrupted(_)), "{err}");

            let reader = Hub::open_read_only(dir.path()).unwrap();
            assert_eq!(reader.entries().iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["keep"]);
            assert_eq!(reader.load("keep").unwrap().0, m0);

            let hub = Hub::open(dir.path()).unwrap();
            let report = hub.fsck().unwrap();
            assert!(report.is_clean(), "step {step}: {report:?}");
        }
        for step in 0..REMOVE_STEPS {
            let dir = tempfile::tempdir().unwrap();
            let mut hub = Hub::init(dir.path()).unwrap();
            let (m0, h0) = module(0, "gone");
            hub.add(&m0, &h0).unwrap();
            let _ = hub.remove_halting("gone", Some(Halt(step))).unwrap_err();
            let hub = Hub::open(dir.path()).unwrap();
            assert!(hub.fsck().unwrap().is_clean(), "remove step {step}");
            // Either the removal committed or it did not; nothing in between.
            if hub.contains("gone") {
                assert_eq!(hub.load("gone").unwrap().0, m0);
            }
        }
    }
}
