//! Dataset manifests, image sets and patch batch sampling.
//!
//! On disk a dataset is a directory with one sub-directory per role
//! (`rainy/`, `background/`, `rain/`) holding `<id>.png` files, plus a
//! `manifest.jsonl` file with one JSON record per entry.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rainsynth::{BlendMode, Triplet};
use crate::seed::{derive_seed, rng};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    PairedTriplets,
    RealClean,
    RealRainy,
}

impl DatasetKind {
    fn roles(self) -> &'static [Role] {
        match self {
            DatasetKind::PairedTriplets => &[Role::Rainy, Role::Background, Role::Rain],
            DatasetKind::RealClean => &[Role::Background],
            DatasetKind::RealRainy => &[Role::Rainy],
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" | "paired_triplets" => Ok(Self::PairedTriplets),
            "real_clean" | "clean" => Ok(Self::RealClean),
            "real_rainy" | "rainy" => Ok(Self::RealRainy),
            other => Err(Error::InvalidParameter(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Rainy,
    Background,
    Rain,
}

impl Role {
    pub fn dir_name(self) -> &'static str {
        match self {
            Role::Rainy => "rainy",
            Role::Background => "background",
            Role::Rain => "rain",
        }
    }
}

/// One manifest record. Paths are relative to the manifest root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub rainy: Option<String>,
    pub background: Option<String>,
    pub rain: Option<String>,
    pub mode: Option<BlendMode>,
    pub seed: Option<u64>,
}

impl ManifestEntry {
    pub fn path(&self, role: Role) -> Option<&str> {
        match role {
            Role::Rainy => self.rainy.as_deref(),
            Role::Background => self.background.as_deref(),
            Role::Rain => self.rain.as_deref(),
        }
    }

    fn for_roles(id: &str, roles: &[Role]) -> Self {
        let rel = |r: Role| roles.contains(&r).then(|| format!("{}/{id}.png", r.dir_name()));
        Self {
            id: id.to_string(),
            rainy: rel(Role::Rainy),
            background: rel(Role::Background),
            rain: rel(Role::Rain),
            mode: None,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub kind: DatasetKind,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Sorts entries by id and rejects duplicates or entries missing a role.
    pub fn new(root: impl Into<PathBuf>, kind: DatasetKind, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in entries.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::DuplicateId(pair[0].id.clone()));
            }
        }
        for e in &entries {
            for &role in kind.roles() {
                if e.path(role).is_none() {
                    return Err(Error::InvalidParameter(format!(
                        "entry `{}` lacks a {} path for a {kind:?} manifest",
                        e.id,
                        role.dir_name()
                    )));
                }
            }
        }
        Ok(Self { root: root.into(), kind, entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a `manifest.jsonl`; relative paths resolve against its directory.
    pub fn read(path: &Path, kind: DatasetKind) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let reader = BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::ManifestParse { line: i + 1, reason: e.to_string() })?;
            entries.push(entry);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, kind, entries)
    }
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(ids);
    }
    for item in fs::read_dir(dir)? {
        let path = item?.path();
        let is_png = path.extension().map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false);
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if !ids.insert(stem.to_string()) {
                    return Err(Error::DuplicateId(stem.to_string()));
                }
            }
        }
    }
    Ok(ids)
}

/// Suffix stripped from file stems by [`flat_dir_manifest`], matching the
/// names written by the derain command.
pub const DERAINED_SUFFIX: &str = "_derained";

/// Manifest over the PNG files directly inside `dir`, recorded as the
/// background role. Ids are file stems with any trailing `_derained` removed.
pub fn flat_dir_manifest(dir: &Path) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let entries = png_ids(dir)?
        .into_iter()
        .map(|stem| ManifestEntry {
            id: stem.strip_suffix(DERAINED_SUFFIX).unwrap_or(&stem).to_string(),
            rainy: None,
            background: Some(format!("{stem}.png")),
            rain: None,
            mode: None,
            seed: None,
        })
        .collect();
    Manifest::new(dir, DatasetKind::RealClean, entries)
}

/// Scans `root` for the layout of `kind`, decoding every file to make sure it
/// is usable. Blend mode and seed are carried over from an existing
/// `manifest.jsonl` when one is present.
pub fn build_manifest(root: &Path, kind: DatasetKind) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let roles = kind.roles();
    let per_role: Vec<BTreeSet<String>> =
        roles.iter().map(|r| png_ids(&root.join(r.dir_name()))).collect::<Result<_>>()?;
    let all: BTreeSet<String> = per_role.iter().flatten().cloned().collect();
    for id in &all {
        for (role, ids) in roles.iter().zip(&per_role) {
            if !ids.contains(id) {
                return Err(Error::MissingFile(root.join(role.dir_name()).join(format!("{id}.png"))));
            }
        }
    }
    if all.is_empty() {
        log::warn!("no images found under {} for a {kind:?} dataset", root.display());
    }

    let previous: BTreeMap<String, ManifestEntry> = match Manifest::read(&root.join(MANIFEST_FILE), kind) {
        Ok(m) => m.entries.into_iter().map(|e| (e.id.clone(), e)).collect(),
        Err(_) => BTreeMap::new(),
    };

    let entries: Vec<ManifestEntry> = all
        .iter()
        .map(|id| {
            let mut e = ManifestEntry::for_roles(id, roles);
            if let Some(prev) = previous.get(id) {
                e.mode = prev.mode;
                e.seed = prev.seed;
            }
            e
        })
        .collect();

    entries.par_iter().try_for_each(|e| {
        roles.iter().try_for_each(|&r| {
            let path = root.join(e.path(r).expect("role path set"));
            image::image_dimensions(&path)
                .map(|_| ())
                .map_err(|err| Error::UndecodableImage { path: path.clone(), reason: err.to_string() })?;
            ImageTensor::load_png(&path).map(|_| ())
        })
    })?;

    Manifest::new(root, kind, entries)
}

/// Writes triplets under `root` and saves the manifest alongside them.
pub fn write_triplets(root: &Path, triplets: &[Triplet]) -> Result<Manifest> {
    let entries = write_triplet_files(root, 0, triplet_id_width(triplets.len()), triplets)?;
    finish_triplet_manifest(root, entries)
}

/// Zero-padded id width used for a dataset of `count` triplets.
pub fn triplet_id_width(count: usize) -> usize {
    count.saturating_sub(1).to_string().len().max(6)
}

/// Writes one chunk of a triplet dataset whose first element has index
/// `first`, returning the manifest entries. Lets large datasets be written
/// without holding every triplet in memory.
pub fn write_triplet_files(
    root: &Path,
    first: usize,
    width: usize,
    triplets: &[Triplet],
) -> Result<Vec<ManifestEntry>> {
    for role in [Role::Rainy, Role::Background, Role::Rain] {
        fs::create_dir_all(root.join(role.dir_name()))?;
    }
    triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let id = format!("{:0width$}", first + i);
            let mut e = ManifestEntry::for_roles(&id, DatasetKind::PairedTriplets.roles());
            e.mode = Some(t.mode);
            e.seed = Some(t.seed);
            t.rainy.save_png(&root.join(e.rainy.as_ref().unwrap()))?;
            t.background.save_png(&root.join(e.background.as_ref().unwrap()))?;
            t.rain.save_png(&root.join(e.rain.as_ref().unwrap()))?;
            Ok(e)
        })
        .collect()
}

/// Validates `entries` and writes `root/manifest.jsonl`.
pub fn finish_triplet_manifest(root: &Path, entries: Vec<ManifestEntry>) -> Result<Manifest> {
    let manifest = Manifest::new(root, DatasetKind::PairedTriplets, entries)?;
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// One image of an [`ImageSet`]: decoded, or a PNG read on demand.
#[derive(Clone, Debug)]
enum Slot {
    Loaded(ImageTensor),
    OnDisk { path: PathBuf, dim: (usize, usize, usize) },
}

impl Slot {
    /// Reads the PNG header only. Channel counts follow
    /// [`ImageTensor::from_dynamic`]: gray-like formats give 1, others 3.
    fn probe(path: &Path) -> Result<Self> {
        use image::ImageDecoder;
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let undecodable =
            |e: image::ImageError| Error::UndecodableImage { path: path.to_path_buf(), reason: e.to_string() };
        let decoder =
            image::codecs::png::PngDecoder::new(BufReader::new(fs::File::open(path)?)).map_err(undecodable)?;
        let (w, h) = decoder.dimensions();
        let channels = match decoder.color_type() {
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 => 1,
            _ => 3,
        };
        Ok(Slot::OnDisk { path: path.to_path_buf(), dim: (h as usize, w as usize, channels) })
    }

    fn dim(&self) -> (usize, usize, usize) {
        match self {
            Slot::Loaded(img) => img.dim(),
            Slot::OnDisk { dim, .. } => *dim,
        }
    }

    fn image(&self) -> Result<Cow<'_, ImageTensor>> {
        match self {
            Slot::Loaded(img) => Ok(Cow::Borrowed(img)),
            Slot::OnDisk { path, dim } => {
                let img = ImageTensor::load_png(path)?;
                if img.dim() != *dim {
                    return Err(Error::ShapeMismatch {
                        left: vec![dim.0, dim.1, dim.2],
                        right: vec![img.height(), img.width(), img.channels()],
                    });
                }
                Ok(Cow::Owned(img))
            }
        }
    }
}

/// The images of a manifest, either decoded up front ([`ImageSet::load`])
/// or decoded per batch ([`ImageSet::open`]).
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub kind: DatasetKind,
    pub ids: Vec<String>,
    rainy: Vec<Option<Slot>>,
    background: Vec<Option<Slot>>,
    rain: Vec<Option<Slot>>,
}

impl ImageSet {
    fn from_manifest(manifest: &Manifest, read: impl Fn(&Path) -> Result<Slot> + Sync) -> Result<Self> {
        let read_role = |role: Role| -> Result<Vec<Option<Slot>>> {
            manifest
                .entries
                .par_iter()
                .map(|e| match e.path(role) {
                    Some(rel) if manifest.kind.roles().contains(&role) => read(&manifest.resolve(rel)).map(Some),
                    _ => Ok(None),
                })
                .collect()
        };
        Ok(Self {
            kind: manifest.kind,
            ids: manifest.entries.iter().map(|e| e.id.clone()).collect(),
            rainy: read_role(Role::Rainy)?,
            background: read_role(Role::Background)?,
            rain: read_role(Role::Rain)?,
        })
    }

    /// Decodes every image into memory.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        Self::from_manifest(manifest, |p| ImageTensor::load_png(p).map(Slot::Loaded))
    }

    /// Reads only image headers; pixels are decoded when a batch samples
    /// them, so memory stays proportional to the batch, not the dataset.
    pub fn open(manifest: &Manifest) -> Result<Self> {
        Self::from_manifest(manifest, Slot::probe)
    }

    pub fn from_triplets(triplets: &[Triplet]) -> Self {
        let role =
            |f: fn(&Triplet) -> &ImageTensor| triplets.iter().map(|t| Some(Slot::Loaded(f(t).clone()))).collect();
        Self {
            kind: DatasetKind::PairedTriplets,
            ids: (0..triplets.len()).map(|i| format!("{i:06}")).collect(),
            rainy: role(|t| &t.rainy),
            background: role(|t| &t.background),
            rain: role(|t| &t.rain),
        }
    }

    pub fn from_images(kind: DatasetKind, images: Vec<ImageTensor>) -> Self {
        let n = images.len();
        let wrap: Vec<Option<Slot>> = images.into_iter().map(|i| Some(Slot::Loaded(i))).collect();
        let none = || vec![None; n];
        let (rainy, background) = match kind {
            DatasetKind::RealClean => (none(), wrap),
            _ => (wrap, none()),
        };
        Self { kind, ids: (0..n).map(|i| format!("{i:06}")).collect(), rainy, background, rain: none() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn slot(&self, role: Role, i: usize) -> Option<&Slot> {
        match role {
            Role::Rainy => self.rainy[i].as_ref(),
            Role::Background => self.background[i].as_ref(),
            Role::Rain => self.rain[i].as_ref(),
        }
    }

    fn reference_dim(&self, i: usize) -> (usize, usize, usize) {
        self.rainy[i].as_ref().or(self.background[i].as_ref()).expect("every entry has at least one role").dim()
    }

    /// The image of `role` for entry `i`, decoding it if needed.
    pub fn get(&self, role: Role, i: usize) -> Result<Option<Cow<'_, ImageTensor>>> {
        self.slot(role, i).map(Slot::image).transpose()
    }

    /// Draws `n` crops with replacement; identical crop windows (and flips)
    /// are applied to every role of a sampled entry.
    pub fn sample_batch(&self, n: usize, patch: usize, seed: u64, augment: Augment) -> Result<Batch> {
        if n == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::InvalidParameter("cannot sample from an empty image set".into()));
        }
        for i in 0..self.len() {
            let (height, width, _) = self.reference_dim(i);
            if height < patch || width < patch {
                return Err(Error::ImageSmallerThanPatch { id: self.ids[i].clone(), height, width, patch });
            }
        }
        let channels = self.reference_dim(0).2;
        let mut rng = rng(seed);
        let picks: Vec<(usize, usize, usize, bool)> = (0..n)
            .map(|_| {
                let i = rng.gen_range(0..self.len());
                let (height, width, _) = self.reference_dim(i);
                let top = rng.gen_range(0..=height - patch);
                let left = rng.gen_range(0..=width - patch);
                let flip = augment.horizontal_flip && rng.gen_bool(0.5);
                (i, top, left, flip)
            })
            .collect();

        let stack = |role: Role| -> Result<Option<Array4<f32>>> {
            if (0..self.len()).any(|i| self.slot(role, i).is_none()) {
                return Ok(None);
            }
            let mut out = Array4::zeros((n, patch, patch, channels));
            for (k, &(i, top, left, flip)) in picks.iter().enumerate() {
                let img = self.get(role, i)?.expect("checked present");
                if img.channels() != channels {
                    return Err(Error::ShapeMismatch { left: vec![channels], right: vec![img.channels()] });
                }
                let window = img.view().slice_move(s![top..top + patch, left..left + patch, ..]);
                let mut dst = out.slice_mut(s![k, .., .., ..]);
                if flip {
                    dst.assign(&window.slice(s![.., ..;-1, ..]));
                } else {
                    dst.assign(&window);
                }
            }
            Ok(Some(out))
        };
        Ok(Batch { rainy: stack(Role::Rainy)?, background: stack(Role::Background)?, rain: stack(Role::Rain)?, n })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub horizontal_flip: bool,
}

/// `N × H × W × C` patch stacks; which roles are present depends on the
/// dataset kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rainy: Option<Array4<f32>>,
    pub background: Option<Array4<f32>>,
    pub rain: Option<Array4<f32>>,
    pub n: usize,
}

/// Samples one batch straight from the manifest's files.
pub fn sample_batch(manifest: &Manifest, n: usize, patch: usize, seed: u64, augment: Augment) -> Result<Batch> {
    ImageSet::open(manifest)?.sample_batch(n, patch, seed, augment)
}

/// Cuts `count` random `patch × patch` crops from `images` (cycled in order),
/// writes them under `out_dir/<role>/` and returns their manifest.
pub fn crop_real_finetune_set(
    images: &[ImageTensor],
    count: usize,
    patch: usize,
    seed: u64,
    out_dir: &Path,
    kind: DatasetKind,
) -> Result<Manifest> {
    if kind == DatasetKind::PairedTriplets {
        return Err(Error::InvalidParameter("real crops are unpaired".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidParameter("no real images supplied".into()));
    }
    for (i, img) in images.iter().enumerate() {
        if img.height() < patch || img.width() < patch {
            return Err(Error::ImageSmallerThanPatch {
                id: format!("image #{i}"),
                height: img.height(),
                width: img.width(),
                patch,
            });
        }
    }
    let role = kind.roles()[0];
    fs::create_dir_all(out_dir.join(role.dir_name()))?;
    let width = count.saturating_sub(1).to_string().len().max(6);
    let entries: Vec<ManifestEntry> = (0..count)
        .into_par_iter()
        .map(|k| {
            let img = &images[k % images.len()];
            let crop_seed = derive_seed(seed, k as u64);
            let mut rng = rng(crop_seed);
            let top = rng.gen_range(0..=img.height() - patch);
            let left = rng.gen_range(0..=img.width() - patch);
            let crop = img.crop(top, left, patch, patch)?;
            let id = format!("{k:0width$}");
            let mut e = ManifestEntry::for_roles(&id, kind.roles());
            e.seed = Some(crop_seed);
            crop.save_png(&out_dir.join(e.path(role).expect("role set")))?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(out_dir, kind, entries)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Ids present in one list but not the other, sorted.
pub fn id_mismatches(a: &Manifest, b: &Manifest) -> Vec<String> {
    let left: HashSet<&str> = a.entries.iter().map(|e| e.id.as_str()).collect();
    let right: HashSet<&str> = b.entries.iter().map(|e| e.id.as_str()).collect();
    let mut out: Vec<String> = left.symmetric_difference(&right).map(|s| s.to_string()).collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rainsynth::{blend, procedural_background, RainParams};

    fn triplets(n: usize, size: usize) -> Vec<Triplet> {
        (0..n)
            .map(|i| {
                let bg = procedural_background(size, size + 8, 3, i as u64);
                let p = RainParams { seed: i as u64, streak_length: 8, ..RainParams::default() };
                Triplet::compose(&bg, &p, BlendMode::Screen).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_manifest(dir.path(), DatasetKind::PairedTriplets).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn corrupt_png_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_triplets(dir.path(), &triplets(2, 16)).unwrap();
        let bad = dir.path().join("rain/000001.png");
        fs::write(&bad, b"not a png").unwrap();
        match build_manifest(dir.path(), DatasetKind::PairedTriplets) {
            Err(Error::UndecodableImage { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected undecodable error, got {other:?}"),
        }
    }

    #[test]
    fn missing_role_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_triplets(dir.path(), &triplets(2, 16)).unwrap();
        fs::remove_file(dir.path().join("background/000000.png")).unwrap();
        assert!(matches!(build_manifest(dir.path(), DatasetKind::PairedTriplets), Err(Error::MissingFile(_))));
    }

    #[test]
    fn manifest_round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_triplets(dir.path(), &triplets(3, 16)).unwrap();
        let rebuilt = build_manifest(dir.path(), DatasetKind::PairedTriplets).unwrap();
        assert_eq!(written.entries(), rebuilt.entries());
        let reread = Manifest::read(&dir.path().join(MANIFEST_FILE), DatasetKind::PairedTriplets).unwrap();
        assert_eq!(reread.entries(), written.entries());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = ManifestEntry::for_roles("a", &[Role::Rainy]);
        assert!(matches!(
            Manifest::new("/tmp", DatasetKind::RealRainy, vec![e.clone(), e]),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn paired_batch_is_aligned_and_deterministic() {
        let set = ImageSet::from_triplets(&triplets(3, 20));
        let a = set.sample_batch(5, 16, 9, Augment { horizontal_flip: true }).unwrap();
        let b = set.sample_batch(5, 16, 9, Augment { horizontal_flip: true }).unwrap();
        assert_eq!(a, b);
        let (rainy, bg, rain) = (a.rainy.unwrap(), a.background.unwrap(), a.rain.unwrap());
        assert_eq!(rainy.dim(), (5, 16, 16, 3));
        for k in 0..5 {
            let b = ImageTensor::new(bg.slice(s![k, .., .., ..]).to_owned()).unwrap();
            let r = ImageTensor::new(rain.slice(s![k, .., .., ..]).to_owned()).unwrap();
            let o = blend(&b, &r, BlendMode::Screen).unwrap();
            assert_eq!(o.view(), rainy.slice(s![k, .., .., ..]));
        }
    }

    #[test]
    fn lazy_and_eager_sets_sample_identically() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_triplets(dir.path(), &triplets(3, 20)).unwrap();
        let (eager, lazy) = (ImageSet::load(&manifest).unwrap(), ImageSet::open(&manifest).unwrap());
        let augment = Augment { horizontal_flip: true };
        assert_eq!(eager.sample_batch(4, 16, 2, augment).unwrap(), lazy.sample_batch(4, 16, 2, augment).unwrap());
        fs::remove_file(dir.path().join("rain/000002.png")).unwrap();
        assert!(ImageSet::open(&manifest).is_err());
    }

    #[test]
    fn real_batch_has_single_role() {
        let imgs = vec![procedural_background(20, 20, 3, 1)];
        let set = ImageSet::from_images(DatasetKind::RealRainy, imgs);
        let b = set.sample_batch(2, 16, 0, Augment::default()).unwrap();
        assert!(b.rainy.is_some() && b.background.is_none() && b.rain.is_none());
        assert!(matches!(set.sample_batch(1, 32, 0, Augment::default()), Err(Error::ImageSmallerThanPatch { .. })));
    }

    #[test]
    fn finetune_crops() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural_background(32, 32, 3, 3).quantized();
        let m =
            crop_real_finetune_set(std::slice::from_ref(&img), 1, 32, 5, dir.path(), DatasetKind::RealRainy).unwrap();
        assert_eq!(m.len(), 1);
        let back = ImageTensor::load_png(&m.resolve(m.entries()[0].rainy.as_ref().unwrap())).unwrap();
        assert_eq!(back, img);
        let small = procedural_background(10, 10, 3, 3);
        assert!(matches!(
            crop_real_finetune_set(&[small], 1, 32, 5, dir.path(), DatasetKind::RealRainy),
            Err(Error::ImageSmallerThanPatch { .. })
        ));
    }
}
