//! Dataset manifests and in-memory datasets.
//!
//! Manifest format (UTF-8): a `#classes: a,b,c` header, an optional
//! `#split: name` line, then one `relative/path.ppm<TAB>label` per line.
//! Paths are relative to the directory holding the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::ppm::load_image;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const SPLITS: [&str; 4] = ["train", "val", "test_day", "test_night"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub split: Option<String>,
    pub entries: Vec<(String, usize)>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path_of(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].0)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut lines = text.split_terminator('\n');
        let header = lines.next().ok_or_else(|| Error::Dataset("empty manifest".into()))?;
        let classes: Vec<String> = header
            .strip_prefix("#classes:")
            .ok_or_else(|| Error::Dataset("manifest must start with '#classes:'".into()))?
            .trim()
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        if classes.iter().any(|c| c.is_empty()) {
            return Err(Error::Dataset("empty class name in manifest header".into()));
        }
        let mut split = None;
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if let Some(s) = line.strip_prefix("#split:") {
                if split.is_some() || !entries.is_empty() {
                    return Err(Error::Dataset("'#split:' must directly follow the classes header".into()));
                }
                split = Some(s.trim().to_string());
                continue;
            }
            let (path, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("manifest line {}: expected 'path<TAB>label'", n + 2)))?;
            let label: usize = label
                .parse()
                .map_err(|_| Error::Dataset(format!("manifest line {}: bad label {label:?}", n + 2)))?;
            if label >= classes.len() {
                return Err(Error::Dataset(format!(
                    "manifest line {}: label {label} out of range for {} classes",
                    n + 2,
                    classes.len()
                )));
            }
            if path.is_empty() {
                return Err(Error::Dataset(format!("manifest line {}: empty path", n + 2)));
            }
            entries.push((path.to_string(), label));
        }
        Ok(DatasetManifest {
            root,
            classes,
            split,
            entries,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#classes: {}\n", self.classes.join(","));
        if let Some(split) = &self.split {
            let _ = writeln!(s, "#split: {split}");
        }
        for (p, l) in &self.entries {
            let _ = writeln!(s, "{p}\t{l}");
        }
        s
    }

    /// Read a manifest and check that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        if let Some(missing) = (0..m.len()).map(|i| m.path_of(i)).find(|p| !p.is_file()) {
            return Err(Error::Dataset(format!("missing image {}", missing.display())));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Build a manifest from a `root/<class>/*.ppm` tree. Classes and files
    /// are taken in lexicographic order.
    pub fn from_class_folders(root: &Path) -> Result<Self> {
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Dataset(format!("no class folders under {}", root.display())));
        }
        let mut classes = Vec::new();
        let mut entries = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            let name = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::Dataset(format!("non-utf-8 folder {}", dir.display())))?;
            if name.contains(',') {
                return Err(Error::Dataset(format!("class folder name {name:?} contains a comma")));
            }
            classes.push(name.to_string());
            let mut files: Vec<String> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().map(str::to_string))
                .filter(|f| f.ends_with(".ppm"))
                .collect();
            files.sort();
            entries.extend(files.into_iter().map(|f| (format!("{name}/{f}"), label)));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            classes,
            split: None,
            entries,
        })
    }
}

/// Stack the given entries into `[N, 3, H, W]` with their labels.
pub fn load_batch<T: Element>(m: &DatasetManifest, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= m.len()) {
        return Err(Error::OutOfRange {
            op: "load_batch",
            detail: format!("index {bad} with {} entries", m.len()),
        });
    }
    let imgs = indices.iter().map(|&i| load_image::<T>(&m.path_of(i))).collect::<Result<Vec<_>>>()?;
    let labels = indices.iter().map(|&i| m.entries[i].1).collect();
    Ok((Tensor::stack(&imgs)?, labels))
}

/// A fully loaded split.
#[derive(Debug, Clone)]
pub struct Dataset<T: Element> {
    pub classes: Vec<String>,
    /// `[N, 3, H, W]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Element> Dataset<T> {
    pub fn load(m: &DatasetManifest) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::Dataset(format!("split {:?} has no entries", m.split)));
        }
        let imgs = (0..m.len())
            .into_par_iter()
            .map(|i| load_image::<T>(&m.path_of(i)))
            .collect::<Result<Vec<_>>>()?;
        let first = imgs[0].shape().to_vec();
        if let Some(i) = imgs.iter().position(|t| t.shape() != first.as_slice()) {
            return Err(Error::Dataset(format!(
                "{}: size {:?} differs from {:?}",
                m.path_of(i).display(),
                imgs[i].shape(),
                first
            )));
        }
        Ok(Dataset {
            classes: m.classes.clone(),
            images: Tensor::stack(&imgs)?,
            labels: m.entries.iter().map(|e| e.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::OutOfRange {
                op: "batch",
                detail: format!("index {bad} with {} entries", self.len()),
            });
        }
        let t = self.images.gather_rows(indices)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Like [`Self::batch`], mirroring each image horizontally with
    /// probability one half.
    pub fn batch_augmented<R: Rng + ?Sized>(&self, indices: &[usize], rng: &mut R) -> Result<(Tensor<T>, Vec<usize>)> {
        let (mut t, labels) = self.batch(indices)?;
        let s = t.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let data = t.data_mut();
        for n in 0..s[0] {
            if rng.gen::<bool>() {
                for row in data[n * c * h * w..(n + 1) * c * h * w].chunks_mut(w) {
                    row.reverse();
                }
            }
        }
        Ok((t, labels))
    }
}

/// Shuffled index order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::seed::rng(&[seed, 0xE90C, epoch]));
    idx
}

/// Indices of the `step`-th batch in an endless sequence of shuffled epochs.
/// A trailing partial batch is dropped.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = (n / batch).max(1);
    let (epoch, k) = (step / per_epoch, step % per_epoch);
    let order = epoch_order(n, seed, epoch as u64);
    let b = batch.min(n);
    order[k * b..(k + 1) * b].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ppm::save_image;

    fn write_fixture(dir: &Path) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..4 {
            let t = Tensor::<f32>::full(&[3, 2, 2], i as f32 / 4.0);
            let rel = format!("x/{i}.ppm");
            save_image(&t, &dir.join(&rel)).unwrap();
            entries.push((rel, i % 2));
        }
        let m = DatasetManifest {
            root: dir.to_path_buf(),
            classes: vec!["a".into(), "b".into()],
            split: Some("train".into()),
            entries,
        };
        m.save(&dir.join("train.manifest")).unwrap();
        m
    }

    #[test]
    fn manifest_text_round_trip() {
        let text = "#classes: a,b,c\n#split: val\nx/0.ppm\t2\nx/1.ppm\t0\n";
        let m = DatasetManifest::parse(text, PathBuf::new()).unwrap();
        assert_eq!(m.to_text(), text);
        let plain = "#classes: a,b\ny.ppm\t1\n";
        assert_eq!(DatasetManifest::parse(plain, PathBuf::new()).unwrap().to_text(), plain);
    }

    #[test]
    fn manifest_errors() {
        for bad in ["", "x.ppm\t0\n", "#classes: a\nx.ppm\t1\n", "#classes: a\nx.ppm 0\n", "#classes: a,\n"] {
            assert!(DatasetManifest::parse(bad, PathBuf::new()).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn load_checks_files_and_batches() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_fixture(dir.path());
        let loaded = DatasetManifest::load(&dir.path().join("train.manifest")).unwrap();
        assert_eq!(loaded, m);
        let (b, l) = load_batch::<f32>(&loaded, &[0]).unwrap();
        assert_eq!(b.shape(), &[1, 3, 2, 2]);
        let single: Tensor<f32> = load_image(&loaded.path_of(0)).unwrap();
        assert_eq!(b.data(), single.data());
        assert_eq!(l, vec![0]);
        let (b, l) = load_batch::<f32>(&loaded, &[3, 3]).unwrap();
        assert_eq!(b.data()[..12], b.data()[12..]);
        assert_eq!(l, vec![1, 1]);
        assert!(load_batch::<f32>(&loaded, &[4]).is_err());
        std::fs::remove_file(dir.path().join("x/2.ppm")).unwrap();
        assert!(DatasetManifest::load(&dir.path().join("train.manifest")).is_err());
    }

    #[test]
    fn class_folders() {
        let dir = tempfile::tempdir().unwrap();
        for (c, n) in [("cat", 2), ("ant", 1)] {
            for i in 0..n {
                save_image(&Tensor::<f32>::zeros(&[3, 1, 1]), &dir.path().join(c).join(format!("{i}.ppm"))).unwrap();
            }
        }
        std::fs::write(dir.path().join("cat/readme.txt"), "x").unwrap();
        let m = DatasetManifest::from_class_folders(dir.path()).unwrap();
        assert_eq!(m.classes, vec!["ant", "cat"]);
        assert_eq!(m.entries, vec![("ant/0.ppm".into(), 0), ("cat/0.ppm".into(), 1), ("cat/1.ppm".into(), 1)]);
    }

    #[test]
    fn epoch_covers_every_entry_once() {
        for n in [1, 7, 32] {
            let mut o = epoch_order(n, 3, 5);
            o.sort();
            assert_eq!(o, (0..n).collect::<Vec<_>>());
        }
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(16, 4, 1, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
        assert_ne!(batch_indices(16, 4, 1, 0), batch_indices(16, 4, 1, 4));
    }

    #[test]
    fn flips_mirror_rows() {
        let img = Tensor::<f64>::from_f64(vec![1, 3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ds = Dataset {
            classes: vec!["a".into()],
            images: img,
            labels: vec![0],
        };
        let mut flipped = false;
        let mut rng = crate::seed::rng(&[0]);
        for _ in 0..16 {
            let (b, _) = ds.batch_augmented(&[0], &mut rng).unwrap();
            if b.data()[0] == 2.0 {
                assert_eq!(b.data(), &[2.0, 1.0, 4.0, 3.0, 6.0, 5.0]);
                flipped = true;
            }
        }
        assert!(flipped);
    }
}
