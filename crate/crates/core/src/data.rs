//! PNG datasets: pairing, resizing, augmentation and saliency output.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::config::NetworkConfig;
use crate::edge::{extract_edge_map, fit_edge_map};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Shape, Tensor};

const EDGE_SUFFIX: &str = ".edge";

/// `(stem, path)` pairs sorted by stem.
pub type StemList = Vec<(String, PathBuf)>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub edge: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One training or evaluation example at network resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1,3,S,S]` in `[0,1]`.
    pub image: Tensor,
    /// Binary `[1,1,S/2,S/2]` supervision mask.
    pub gt: Tensor,
    /// Binary `[1,1,S,S]` mask for full-resolution evaluation.
    pub gt_full: Tensor,
    /// `[1,1,S/2,S/2]` in `[0,1]`.
    pub edge: Tensor,
}

/// `(stem, path)` of every `*.png` directly inside `dir`, sorted by stem.
/// Files named `*.edge.png` are listed separately as the second element.
pub fn list_pngs(dir: &Path) -> Result<(StemList, StemList)> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut plain = Vec::new();
    let mut edges = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        match stem.strip_suffix(EDGE_SUFFIX) {
            Some(base) => edges.push((base.to_owned(), path)),
            None => plain.push((stem, path)),
        }
    }
    plain.sort();
    edges.sort();
    Ok((plain, edges))
}

/// Pairs `root/images/*.png` with `root/masks/*.png` by file stem and picks
/// up optional `root/images/<stem>.edge.png` edge maps.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for dir in [&images_dir, &masks_dir] {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
    }
    let (images, edges) = list_pngs(&images_dir)?;
    let (masks, _) = list_pngs(&masks_dir)?;

    let mut unpaired: Vec<String> = images
        .iter()
        .filter(|(s, _)| masks.binary_search_by(|(m, _)| m.cmp(s)).is_err())
        .map(|(s, _)| format!("{s} (no mask)"))
        .collect();
    unpaired.extend(
        masks
            .iter()
            .filter(|(s, _)| images.binary_search_by(|(i, _)| i.cmp(s)).is_err())
            .map(|(s, _)| format!("{s} (no image)")),
    );
    if !unpaired.is_empty() {
        return Err(Error::Dataset(format!(
            "unpaired files under {}: {}",
            root.display(),
            unpaired.join(", ")
        )));
    }

    let entries = images
        .into_iter()
        .zip(masks)
        .map(|((id, image), (_, mask))| {
            let edge = edges
                .binary_search_by(|(e, _)| e.cmp(&id))
                .ok()
                .map(|i| edges[i].1.clone());
            DatasetEntry { id, image, mask, edge }
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("cannot decode PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("cannot decode PNG: {e}")))?;
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, channels, buf))
}

/// Reads a PNG as `[1,C,H,W]` in `[0,1]` with `C` 1 (gray) or 3 (colour);
/// alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let (h, w, samples, buf) = decode_png(path)?;
    let c = if samples >= 3 { 3 } else { 1 };
    let mut t = Tensor::zeros(Shape::new(1, c, h, w));
    let plane = h * w;
    let data = t.data_mut();
    for (px, chunk) in buf.chunks_exact(samples).enumerate() {
        for ch in 0..c {
            data[ch * plane + px] = chunk[ch] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Colour image as `[1,3,H,W]`; gray files are replicated to three channels.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let t = read_png(path)?;
    if t.shape().c() == 3 {
        return Ok(t);
    }
    let s = t.shape();
    let mut out = Vec::with_capacity(3 * s.plane());
    for _ in 0..3 {
        out.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(1, 3, s.h(), s.w()), out)
}

/// Single-channel map as `[1,1,H,W]`, colour files averaged.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let t = read_png(path)?;
    Ok(if t.shape().c() == 1 { t } else { ops::channel_mean(&t) })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1,1,H,W]` (gray) or `[1,3,H,W]` (RGB) tensor as an 8-bit PNG
/// with `round(255·v)` per sample.
pub fn write_png(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    let color = match (s.n(), s.c()) {
        (1, 1) => png::ColorType::Grayscale,
        (1, 3) => png::ColorType::Rgb,
        _ => {
            return Err(Error::shape(
                "write_png",
                format!("expected [1,1,H,W] or [1,3,H,W], got {s}"),
            ))
        }
    };
    let plane = s.plane();
    let mut bytes = Vec::with_capacity(s.numel());
    for px in 0..plane {
        for ch in 0..s.c() {
            bytes.push(to_byte(t.data()[ch * plane + px]));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), s.w() as u32, s.h() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Saliency maps must be single-channel.
pub fn write_saliency(map: &Tensor, path: &Path) -> Result<()> {
    if map.shape().c() != 1 {
        return Err(Error::shape(
            "write_saliency",
            format!("expected one channel, got {}", map.shape()),
        ));
    }
    write_png(map, path)
}

fn binarize(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Network input and edge map for one image: the image resized to the input
/// resolution of `cfg`, and the edge map read from `edge` when given or
/// derived from the image otherwise.
pub fn prepare_input(image: &Path, edge: Option<&Path>, cfg: &NetworkConfig) -> Result<(Tensor, Tensor)> {
    let s = cfg.input_size;
    let raw = read_image(image)?;
    let image = ops::bilinear_resize(&raw, s, s)?.map(|v| v.clamp(0.0, 1.0));
    let edge = match edge {
        Some(p) => fit_edge_map(&read_mask(p)?, cfg.output_size())?,
        None => extract_edge_map(&image)?,
    };
    Ok((image, edge))
}

/// Loads an entry at the network resolution of `cfg`.
pub fn prepare_sample(entry: &DatasetEntry, cfg: &NetworkConfig) -> Result<Sample> {
    let s = cfg.input_size;
    let half = cfg.output_size();
    let (image, edge) = prepare_input(&entry.image, entry.edge.as_deref(), cfg)?;
    let mask = read_mask(&entry.mask)?;
    let gt = binarize(&ops::nearest_resize(&mask, half, half)?);
    let gt_full = binarize(&ops::nearest_resize(&mask, s, s)?);
    Ok(Sample {
        id: entry.id.clone(),
        image,
        gt,
        gt_full,
        edge,
    })
}

pub fn hflip_augment(sample: &Sample) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: sample.image.flip_horizontal(),
        gt: sample.gt.flip_horizontal(),
        gt_full: sample.gt_full.flip_horizontal(),
        edge: sample.edge.flip_horizontal(),
    }
}

/// A bright square of side `S/2` centred on a dark background, with its
/// mask. Used as the single-image overfitting fixture.
pub fn synthetic_square(size: usize) -> (Tensor, Tensor) {
    let lo = size / 4;
    let hi = size - size / 4;
    let inside = |i: usize, j: usize| (lo..hi).contains(&i) && (lo..hi).contains(&j);
    let mut image = Tensor::zeros(Shape::new(1, 3, size, size));
    let mut mask = Tensor::zeros(Shape::new(1, 1, size, size));
    for i in 0..size {
        for j in 0..size {
            let fg = inside(i, j);
            for (c, (bright, dark)) in [(0.9, 0.1), (0.8, 0.15), (0.7, 0.2)].into_iter().enumerate() {
                image.set(0, c, i, j, if fg { bright } else { dark });
            }
            if fg {
                mask.set(0, 0, i, j, 1.0);
            }
        }
    }
    (image, mask)
}

/// Writes `synthetic_square` as a one-image dataset under `root`.
pub fn write_synthetic_dataset(root: &Path, size: usize) -> Result<()> {
    let (image, mask) = synthetic_square(size);
    for dir in ["images", "masks"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_png(&image, &root.join("images/square.png"))?;
    write_png(&mask, &root.join("masks/square.png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn touch_png(path: &Path, c: usize, h: usize, w: usize, v: f64) {
        write_png(&Tensor::full(Shape::new(1, c, h, w), v), path).unwrap();
    }

    fn layout(root: &Path, images: &[&str], masks: &[&str]) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        for s in images {
            touch_png(&root.join(format!("images/{s}.png")), 3, 4, 4, 0.5);
        }
        for s in masks {
            touch_png(&root.join(format!("masks/{s}.png")), 1, 4, 4, 1.0);
        }
    }

    #[test]
    fn pairs_sorted_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), &["c", "a", "b"], &["b", "c", "a"]);
        let m = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = m.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(m.entries.iter().all(|e| e.edge.is_none()));
    }

    #[test]
    fn unpaired_stems_are_named() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), &["a", "lonely"], &["a", "orphan"]);
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("lonely") && err.contains("orphan"), "{err}");
    }

    #[test]
    fn missing_masks_dir_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("masks"), "{err}");
    }

    #[test]
    fn edge_file_picked_up() {
        let dir = tempfile::tempdir().unwrap();
        layout(dir.path(), &["a", "b"], &["a", "b"]);
        let ep = dir.path().join("images/b.edge.png");
        touch_png(&ep, 1, 4, 4, 0.2);
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].edge, None);
        assert_eq!(m.entries[1].edge.as_deref(), Some(ep.as_path()));

        let cfg = NetworkConfig::desk();
        let s = prepare_sample(&m.entries[1], &cfg).unwrap();
        assert_eq!(s.edge.shape(), Shape::new(1, 1, 48, 48));
        assert!(s.edge.data().iter().all(|&v| v == 51.0 / 255.0));
    }

    #[test]
    fn saliency_round_trip_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut map = Tensor::uniform(Shape::new(1, 1, 7, 9), 0.0, 1.0, &mut rng);
        map.set(0, 0, 0, 0, 1.0);
        map.set(0, 0, 0, 1, 0.0);
        map.set(0, 0, 0, 2, 0.5);
        write_saliency(&map, &path).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(back.shape(), map.shape());
        for (a, b) in map.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
        let (_, _, _, raw) = decode_png(&path).unwrap();
        assert_eq!(&raw[..3], &[255, 0, 128]);
    }

    #[test]
    fn rgb_round_trip_and_gray_promotion() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::uniform(Shape::new(1, 3, 5, 6), 0.0, 1.0, &mut rng).map(|v| (v * 255.0).round() / 255.0);
        let p = dir.path().join("rgb.png");
        write_png(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        let g = dir.path().join("g.png");
        touch_png(&g, 1, 2, 3, 1.0);
        assert_eq!(read_image(&g).unwrap(), Tensor::ones(Shape::new(1, 3, 2, 3)));
    }

    #[test]
    fn undecodable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not a png").unwrap();
        let err = read_png(&p).unwrap_err().to_string();
        assert!(err.contains("junk.png"), "{err}");
    }

    #[test]
    fn prepare_resizes_to_network_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        touch_png(&root.join("images/x.png"), 3, 300, 400, 0.4);
        let mut mask = Tensor::zeros(Shape::new(1, 1, 300, 400));
        for i in 100..200 {
            for j in 150..250 {
                mask.set(0, 0, i, j, 0.8);
            }
        }
        write_png(&mask, &root.join("masks/x.png")).unwrap();
        let m = load_dataset(root).unwrap();
        for (cfg, s) in [(NetworkConfig::desk(), 96), (NetworkConfig::paper(), 352)] {
            let sample = prepare_sample(&m.entries[0], &cfg).unwrap();
            assert_eq!(sample.image.shape(), Shape::new(1, 3, s, s));
            assert_eq!(sample.gt.shape(), Shape::new(1, 1, s / 2, s / 2));
            assert_eq!(sample.gt_full.shape(), Shape::new(1, 1, s, s));
            assert!(sample.gt.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(sample.gt.sum() > 0.0);
            assert!(sample.image.data().iter().all(|&v| (v - 0.4).abs() < 0.003));
        }
    }

    #[test]
    fn conforming_sizes_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_synthetic_dataset(root, 96).unwrap();
        let m = load_dataset(root).unwrap();
        let s = prepare_sample(&m.entries[0], &NetworkConfig::desk()).unwrap();
        let (image, mask) = synthetic_square(96);
        let q = image.map(|v| (v * 255.0).round() / 255.0);
        assert_eq!(s.image, q);
        assert_eq!(s.gt_full, mask);
    }

    #[test]
    fn flip_is_involution_and_moves_left_edge() {
        let (image, mask) = synthetic_square(8);
        let mut gt = Tensor::zeros(Shape::new(1, 1, 4, 4));
        gt.set(0, 0, 1, 0, 1.0);
        let s = Sample {
            id: "x".into(),
            image,
            gt: gt.clone(),
            gt_full: mask,
            edge: Tensor::zeros(Shape::new(1, 1, 4, 4)),
        };
        let f = hflip_augment(&s);
        assert_eq!(f.gt.at(0, 0, 1, 3), 1.0);
        assert_eq!(f.gt.at(0, 0, 1, 0), 0.0);
        assert_eq!(hflip_augment(&f), s);
    }
}
