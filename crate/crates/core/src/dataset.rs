//! Labeled multi-domain image collections and their on-disk form.
//!
//! A dataset directory holds `manifest.json` plus two `MDTS` files (images
//! as `f32`, labels as `u32`) per domain and split.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DomainSpec;
use crate::error::{Error, Result};
use crate::mdts::{Container, Payload};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Val];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Images of one domain split, held as `f32` and widened per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    image_shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Samples {
    pub fn with_capacity(image_shape: [usize; 3], n: usize) -> Self {
        Self {
            image_shape,
            images: Vec::with_capacity(n * image_shape.iter().product::<usize>()),
            labels: Vec::with_capacity(n),
        }
    }

    pub fn from_parts(
        image_shape: [usize; 3],
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if images.len() != per * labels.len() {
            return Err(Error::shape(
                "samples",
                format!(
                    "{} image values for {} labels of {image_shape:?}",
                    images.len(),
                    labels.len()
                ),
            ));
        }
        Ok(Self {
            image_shape,
            images,
            labels,
        })
    }

    pub fn push(&mut self, image: &Tensor, label: usize) -> Result<()> {
        if image.shape() != self.image_shape {
            return Err(Error::shape(
                "samples",
                format!("image {:?}, expected {:?}", image.shape(), self.image_shape),
            ));
        }
        self.images.extend(image.data().iter().map(|&v| v as f32));
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw_images(&self) -> &[f32] {
        &self.images
    }

    fn per_image(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Appends image `i`, widened to `f64`, to `out`.
    pub fn extend_image(&self, i: usize, out: &mut Vec<f64>) {
        let per = self.per_image();
        out.extend(
            self.images[i * per..(i + 1) * per]
                .iter()
                .map(|&v| f64::from(v)),
        );
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.batch(&[i]).0.slice_outer(0)
    }

    /// Gathers `[n,c,h,w]` images and their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            self.extend_image(i, &mut data);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(shape, data).expect("gathered extents match"),
            labels,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Samples,
    pub val: Samples,
}

impl DomainData {
    pub fn split(&self, split: Split) -> &Samples {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub domain: u32,
    pub split: Split,
    pub images: String,
    pub labels: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub classes: usize,
    pub image_shape: [usize; 3],
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    /// Manifest for `domains` with the standard file naming.
    pub fn describe(name: &str, classes: usize, seed: u64, domains: &[DomainData]) -> Self {
        let image_shape = domains.first().map_or([0; 3], |d| d.train.image_shape());
        let files = domains
            .iter()
            .flat_map(|d| {
                Split::ALL.into_iter().map(move |split| FileEntry {
                    domain: d.spec.id,
                    split,
                    images: format!("domain{}_{split}_images.mdts", d.spec.id),
                    labels: format!("domain{}_{split}_labels.mdts", d.spec.id),
                    count: d.split(split).len(),
                })
            })
            .collect();
        Self {
            name: name.into(),
            classes,
            image_shape,
            seed,
            domains: domains.iter().map(|d| d.spec.clone()).collect(),
            files,
        }
    }

    fn entry(&self, domain: u32, split: Split) -> Option<&FileEntry> {
        self.files
            .iter()
            .find(|f| f.domain == domain && f.split == split)
    }
}

/// Read access to domain splits. Training code goes through this trait so
/// tests can audit which domains a run touched.
pub trait SampleSource {
    fn classes(&self) -> usize;
    fn image_shape(&self) -> [usize; 3];
    fn domain_ids(&self) -> Vec<u32>;
    fn samples(&self, domain: u32, split: Split) -> Result<&Samples>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    manifest: Manifest,
    domains: Vec<DomainData>,
}

impl DomainDataset {
    pub fn new(manifest: Manifest, domains: Vec<DomainData>) -> Result<Self> {
        if manifest.domains.len() != domains.len() {
            return Err(Error::InvalidArgument(format!(
                "manifest lists {} domains, {} supplied",
                manifest.domains.len(),
                domains.len()
            )));
        }
        for d in &domains {
            for split in Split::ALL {
                if let Some(&bad) = d
                    .split(split)
                    .labels()
                    .iter()
                    .find(|&&l| l >= manifest.classes)
                {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} in domain {} {split} exceeds {} classes",
                        d.spec.id, manifest.classes
                    )));
                }
            }
        }
        Ok(Self { manifest, domains })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn domains(&self) -> &[DomainData] {
        &self.domains
    }

    pub fn domain(&self, id: u32) -> Result<&DomainData> {
        self.domains
            .iter()
            .find(|d| d.spec.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("no domain with id {id}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in &self.domains {
            for split in Split::ALL {
                let entry = self.manifest.entry(d.spec.id, split).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "manifest has no {split} file for domain {}",
                        d.spec.id
                    ))
                })?;
                let s = d.split(split);
                let mut shape = vec![s.len()];
                shape.extend_from_slice(&s.image_shape());
                Container::new(shape, Payload::F32(s.raw_images().to_vec()))?
                    .write(&dir.join(&entry.images))?;
                let labels = s.labels().iter().map(|&l| l as u32).collect();
                Container::new(vec![s.len()], Payload::U32(labels))?
                    .write(&dir.join(&entry.labels))?;
            }
        }
        let path = dir.join(MANIFEST_FILE);
        let json =
            serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let expected = manifest.domains.len() * Split::ALL.len();
        if manifest.files.len() != expected {
            return Err(Error::format(
                &path,
                "files",
                format!(
                    "{} domains need {expected} file entries, found {}",
                    manifest.domains.len(),
                    manifest.files.len()
                ),
            ));
        }
        let mut domains = Vec::with_capacity(manifest.domains.len());
        for spec in &manifest.domains {
            let mut splits = Vec::with_capacity(2);
            for split in Split::ALL {
                let entry = manifest.entry(spec.id, split).ok_or_else(|| {
                    Error::format(
                        &path,
                        "files",
                        format!("no {split} entry for domain {}", spec.id),
                    )
                })?;
                splits.push(load_split(dir, entry, manifest.image_shape)?);
            }
            let val = splits.pop().expect("two splits");
            let train = splits.pop().expect("two splits");
            domains.push(DomainData {
                spec: spec.clone(),
                train,
                val,
            });
        }
        Self::new(manifest, domains).map_err(|e| Error::format(&path, "labels", e.to_string()))
    }
}

fn load_split(dir: &Path, entry: &FileEntry, image_shape: [usize; 3]) -> Result<Samples> {
    let images_path = dir.join(&entry.images);
    let labels_path = dir.join(&entry.labels);
    let images = Container::read(&images_path)?;
    let labels = Container::read(&labels_path)?;
    let mut want = vec![entry.count];
    want.extend_from_slice(&image_shape);
    if images.shape != want {
        return Err(Error::format(
            &images_path,
            "extents",
            format!("expected {want:?}, found {:?}", images.shape),
        ));
    }
    if labels.shape != [entry.count] {
        return Err(Error::format(
            &labels_path,
            "extents",
            format!("expected [{}], found {:?}", entry.count, labels.shape),
        ));
    }
    let Payload::F32(pixels) = images.payload else {
        return Err(Error::format(&images_path, "dtype", "images must be f32"));
    };
    let Payload::U32(labels) = labels.payload else {
        return Err(Error::format(&labels_path, "dtype", "labels must be u32"));
    };
    Samples::from_parts(
        image_shape,
        pixels,
        labels.into_iter().map(|l| l as usize).collect(),
    )
}

impl SampleSource for DomainDataset {
    fn classes(&self) -> usize {
        self.manifest.classes
    }

    fn image_shape(&self) -> [usize; 3] {
        self.manifest.image_shape
    }

    fn domain_ids(&self) -> Vec<u32> {
        self.domains.iter().map(|d| d.spec.id).collect()
    }

    fn samples(&self, domain: u32, split: Split) -> Result<&Samples> {
        Ok(self.domain(domain)?.split(split))
    }
}

/// Plain-text PPM (`P3`) of a `[3,h,w]` image with values in `[0, 1]`.
pub fn ppm(image: &Tensor) -> Result<String> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape(
            "ppm",
            format!("expected [3,h,w], got {:?}", image.shape()),
        ));
    };
    if *c != 3 {
        return Err(Error::shape("ppm", format!("expected 3 channels, got {c}")));
    }
    let area = h * w;
    let mut out = format!("P3\n{w} {h}\n255\n");
    for y in 0..*h {
        let row: Vec<String> = (0..*w)
            .map(|x| {
                let p = y * w + x;
                let px =
                    |ch: usize| (image.data()[ch * area + p].clamp(0.0, 1.0) * 255.0).round() as u8;
                format!("{} {} {}", px(0), px(1), px(2))
            })
            .collect();
        writeln!(out, "{}", row.join("  ")).expect("writing to a String");
    }
    Ok(out)
}

/// Writes the first training image of every (domain, class) as a PPM file,
/// returning the paths written.
pub fn export_ppm(dataset: &DomainDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for d in dataset.domains() {
        for class in 0..dataset.manifest().classes {
            let Some(i) = d.train.labels().iter().position(|&l| l == class) else {
                continue;
            };
            let path = dir.join(format!(
                "domain{}_{}_class{class}.ppm",
                d.spec.id, d.spec.name
            ));
            fs::write(&path, ppm(&d.train.image(i))?).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
