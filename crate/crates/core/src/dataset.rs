//! Frame directories, chunk manifests, I-frame indices and LR generation.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use image::RgbImage;

use crate::error::{EmtError, Result};
use crate::numerics::{bicubic_resize, ScaleFactor, Tensor};

/// I-frame interval used when no sidecar index file is given.
pub const FALLBACK_IFRAME_INTERVAL: usize = 48;

const MANIFEST_HEADER: &str = "emt-manifest 1";

/// Where I-frame indices come from.
#[derive(Clone, Debug, PartialEq)]
pub enum IFrameSource {
    /// One frame index per line.
    Sidecar(PathBuf),
    Interval(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkManifest {
    /// Directory the frame files live in.
    pub root: PathBuf,
    pub frames: Vec<String>,
    pub fps: f64,
    pub scale: usize,
    /// HR size after cropping to multiples of `scale`.
    pub height: usize,
    pub width: usize,
    pub chunks: Vec<Range<usize>>,
    pub iframes: Vec<usize>,
    /// Ranges of chunk indices; adaptation restarts at each group.
    pub groups: Vec<Range<usize>>,
}

impl ChunkManifest {
    /// Manifest for frames held in memory; one chunk, one group.
    pub fn in_memory(
        frame_count: usize,
        fps: f64,
        scale: usize,
        height: usize,
        width: usize,
        iframes: Vec<usize>,
    ) -> Result<Self> {
        let mut m = ChunkManifest {
            root: PathBuf::new(),
            frames: (0..frame_count).map(frame_file_name).collect(),
            fps,
            scale,
            height,
            width,
            chunks: vec![0..frame_count],
            iframes,
            groups: vec![0..1],
        };
        m.iframes = normalize_iframes(std::mem::take(&mut m.iframes), frame_count)?;
        m.validate()?;
        Ok(m)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn frame_path(&self, frame: usize) -> PathBuf {
        self.root.join(&self.frames[frame])
    }

    /// Chunk containing `frame`.
    pub fn chunk_of(&self, frame: usize) -> Option<usize> {
        self.chunks.iter().position(|c| c.contains(&frame))
    }

    /// c_m for every I-frame k_m.
    pub fn iframe_chunks(&self) -> Vec<usize> {
        self.iframes
            .iter()
            .map(|&k| self.chunk_of(k).expect("validated manifest"))
            .collect()
    }

    pub fn iframes_in(&self, chunk: usize) -> Vec<usize> {
        let range = &self.chunks[chunk];
        self.iframes.iter().copied().filter(|k| range.contains(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 {
            return Err(EmtError::Dataset("manifest has no frames".into()));
        }
        if !(2..=4).contains(&self.scale) {
            return Err(EmtError::Dataset(format!("scale {} not in 2..=4", self.scale)));
        }
        if !self.height.is_multiple_of(self.scale) || !self.width.is_multiple_of(self.scale) || self.height == 0 || self.width == 0 {
            return Err(EmtError::Dataset(format!(
                "frame size {}x{} is not a positive multiple of scale {}",
                self.height, self.width, self.scale
            )));
        }
        let mut next = 0;
        for c in &self.chunks {
            if c.start != next || c.end <= c.start {
                return Err(EmtError::Dataset(format!("chunks do not partition [0, {t}) at {c:?}")));
            }
            next = c.end;
        }
        if next != t {
            return Err(EmtError::Dataset(format!("chunks cover [0, {next}) but there are {t} frames")));
        }
        if self.iframes.first() != Some(&0) || self.iframes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EmtError::Dataset("I-frame list must start at 0 and be strictly ascending".into()));
        }
        if let Some(&last) = self.iframes.last() {
            if last >= t {
                return Err(EmtError::Dataset(format!("I-frame {last} beyond {t} frames")));
            }
        }
        let mut next = 0;
        for g in &self.groups {
            if g.start != next || g.end <= g.start {
                return Err(EmtError::Dataset(format!("groups do not partition the chunks at {g:?}")));
            }
            next = g.end;
        }
        if next != self.chunks.len() {
            return Err(EmtError::Dataset("groups do not cover every chunk".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ranges = |rs: &[Range<usize>]| {
            rs.iter().map(|r| format!("{}-{}", r.start, r.end)).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "root {}", self.root.display());
        let _ = writeln!(s, "fps {}", self.fps);
        let _ = writeln!(s, "scale {}", self.scale);
        let _ = writeln!(s, "size {} {}", self.height, self.width);
        let iframes: Vec<String> = self.iframes.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "iframes {}", iframes.join(" "));
        let _ = writeln!(s, "chunks {}", ranges(&self.chunks));
        let _ = writeln!(s, "groups {}", ranges(&self.groups));
        let _ = writeln!(s, "frames {}", self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            let _ = writeln!(s, "{i} {f}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| EmtError::Dataset(format!("manifest: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(bad(format!("missing '{MANIFEST_HEADER}' header")));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing '{key}'")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                None if line == key => Ok(String::new()),
                _ => Err(bad(format!("expected '{key}', found '{line}'"))),
            }
        };
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse()
                .map_err(|_| EmtError::Dataset(format!("manifest: bad {what} '{s}'")))
        }
        fn ranges(s: &str, what: &str) -> Result<Vec<Range<usize>>> {
            s.split_whitespace()
                .map(|r| {
                    let (a, b) = r
                        .split_once('-')
                        .ok_or_else(|| EmtError::Dataset(format!("manifest: bad {what} range '{r}'")))?;
                    Ok(num(a, what)?..num(b, what)?)
                })
                .collect()
        }
        let root = PathBuf::from(field("root")?);
        let fps: f64 = num(&field("fps")?, "fps")?;
        let scale = num(&field("scale")?, "scale")?;
        let size = field("size")?;
        let (h, w) = size.split_once(' ').ok_or_else(|| bad(format!("bad size '{size}'")))?;
        let (height, width) = (num(h, "height")?, num(w, "width")?);
        let iframes = field("iframes")?
            .split_whitespace()
            .map(|k| num(k, "I-frame index"))
            .collect::<Result<Vec<usize>>>()?;
        let chunks = ranges(&field("chunks")?, "chunk")?;
        let groups = ranges(&field("groups")?, "group")?;
        let count: usize = num(&field("frames")?, "frame count")?;
        let mut frames = Vec::with_capacity(count);
        for i in 0..count {
            let line = lines.next().ok_or_else(|| bad(format!("frame table ends before entry {i}")))?;
            let (idx, name) = line.split_once(' ').ok_or_else(|| bad(format!("bad frame line '{line}'")))?;
            if num::<usize>(idx, "frame index")? != i {
                return Err(bad(format!("frame table out of order at '{line}'")));
            }
            frames.push(name.to_string());
        }
        let m = ChunkManifest {
            root,
            frames,
            fps,
            scale,
            height,
            width,
            chunks,
            iframes,
            groups,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::codec::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn normalize_iframes(mut iframes: Vec<usize>, frame_count: usize) -> Result<Vec<usize>> {
    if iframes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EmtError::Dataset("I-frame indices are not strictly ascending".into()));
    }
    if let Some(&k) = iframes.iter().find(|&&k| k >= frame_count) {
        return Err(EmtError::Dataset(format!(
            "I-frame index {k} is beyond the last frame ({frame_count} frames)"
        )));
    }
    if iframes.first() != Some(&0) {
        iframes.insert(0, 0);
    }
    Ok(iframes)
}

pub fn read_iframe_sidecar(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse()
                .map_err(|_| EmtError::Dataset(format!("{}: bad I-frame index '{l}'", path.display())))
        })
        .collect()
}

pub fn write_iframe_sidecar(path: &Path, iframes: &[usize]) -> Result<()> {
    let text: String = iframes.iter().map(|k| format!("{k}\n")).collect();
    crate::codec::write_atomic(path, text.as_bytes())
}

fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

/// Image files in `dir`, sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| EmtError::Dataset(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.is_file() && is_frame_file(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Scan a frame directory. The result has one chunk and one group; see
/// [`chunkify`] and [`group_long_video`].
pub fn ingest(frame_dir: &Path, fps: f64, scale: usize, iframe_source: &IFrameSource) -> Result<ChunkManifest> {
    if !(fps > 0.0) {
        return Err(EmtError::invalid(format!("fps must be positive, got {fps}")));
    }
    let frames = list_frames(frame_dir)?;
    if frames.is_empty() {
        return Err(EmtError::Dataset(format!("{}: no PNG or PPM frames", frame_dir.display())));
    }
    let mut dims = None;
    for name in &frames {
        let path = frame_dir.join(name);
        let d = image::image_dimensions(&path).map_err(|source| EmtError::Image { path: path.clone(), source })?;
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => {
                return Err(EmtError::Dataset(format!(
                    "{name} is {}x{} but earlier frames are {}x{}",
                    d.0, d.1, first.0, first.1
                )))
            }
            _ => {}
        }
    }
    let (w, h) = dims.expect("at least one frame");
    let (w, h) = (w as usize, h as usize);
    let (height, width) = (h - h % scale, w - w % scale);
    let iframes = match iframe_source {
        IFrameSource::Sidecar(path) => read_iframe_sidecar(path)?,
        IFrameSource::Interval(n) => {
            if *n == 0 {
                return Err(EmtError::invalid("I-frame interval must be positive"));
            }
            (0..frames.len()).step_by(*n).collect()
        }
    };
    let iframes = normalize_iframes(iframes, frames.len())?;
    let t = frames.len();
    let m = ChunkManifest {
        root: frame_dir.to_path_buf(),
        frames,
        fps,
        scale,
        height,
        width,
        chunks: vec![0..t],
        iframes,
        groups: vec![0..1],
    };
    m.validate()?;
    Ok(m)
}

/// Uniform chunks of round(chunk_seconds * fps) frames, the last one
/// holding the remainder. Resets grouping to a single group.
pub fn chunkify(manifest: &ChunkManifest, chunk_seconds: f64) -> Result<ChunkManifest> {
    if !(chunk_seconds > 0.0) {
        return Err(EmtError::invalid(format!("chunk length must be positive, got {chunk_seconds}s")));
    }
    let len = ((chunk_seconds * manifest.fps).round() as usize).max(1);
    let t = manifest.frame_count();
    let chunks: Vec<Range<usize>> = (0..t).step_by(len).map(|s| s..(s + len).min(t)).collect();
    let mut m = manifest.clone();
    m.groups = vec![0..chunks.len()];
    m.chunks = chunks;
    Ok(m)
}

/// Split into exactly `count` chunks of near-equal length (frame `f` goes
/// to chunk `f * count / T`).
pub fn chunk_by_count(manifest: &ChunkManifest, count: usize) -> Result<ChunkManifest> {
    let t = manifest.frame_count();
    if count == 0 || count > t {
        return Err(EmtError::invalid(format!("cannot split {t} frames into {count} chunks")));
    }
    let bound = |c: usize| (c * t).div_ceil(count);
    let mut m = manifest.clone();
    m.chunks = (0..count).map(|c| bound(c)..bound(c + 1)).collect();
    m.groups = vec![0..count];
    Ok(m)
}

/// Split the I-frame sequence into groups of at most `iframes_per_group`,
/// moving each boundary back to the start of the chunk that holds the
/// boundary I-frame. A single chunk with more I-frames than the limit
/// still forms one group.
pub fn group_long_video(manifest: &ChunkManifest, iframes_per_group: usize) -> Result<Vec<Range<usize>>> {
    if iframes_per_group == 0 {
        return Err(EmtError::invalid("iframes per group must be at least 1"));
    }
    let chunk_of: Vec<usize> = manifest.iframe_chunks();
    let n_chunks = manifest.chunk_count();
    let mut groups = Vec::new();
    let mut start = 0;
    while start < n_chunks {
        // first I-frame at or after the group start
        let first = chunk_of.iter().position(|&c| c >= start);
        let end = match first.map(|f| f + iframes_per_group) {
            Some(b) if b < chunk_of.len() => chunk_of[b].max(start + 1),
            _ => n_chunks,
        };
        groups.push(start..end);
        start = end;
    }
    Ok(groups)
}

/// An HR frame and its bicubic LR counterpart.
#[derive(Clone, Debug)]
pub struct FramePair {
    pub frame_id: usize,
    pub hr: Arc<Tensor>,
    pub lr: Arc<Tensor>,
}

/// Frame access for a manifest with lazily decoded HR frames and cached LR
/// frames. Each cache slot is written at most once.
#[derive(Debug)]
pub struct FrameStore {
    manifest: ChunkManifest,
    hr: Vec<OnceLock<Arc<Tensor>>>,
    lr: Vec<OnceLock<Arc<Tensor>>>,
}

impl FrameStore {
    pub fn open(manifest: ChunkManifest) -> Self {
        let t = manifest.frame_count();
        FrameStore {
            manifest,
            hr: (0..t).map(|_| OnceLock::new()).collect(),
            lr: (0..t).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Store backed by frames already in memory (1x3xHxW each, cropped).
    pub fn from_frames(manifest: ChunkManifest, frames: Vec<Tensor>) -> Result<Self> {
        if frames.len() != manifest.frame_count() {
            return Err(EmtError::Dataset(format!(
                "{} frames for a manifest of {}",
                frames.len(),
                manifest.frame_count()
            )));
        }
        let store = Self::open(manifest);
        for (slot, f) in store.hr.iter().zip(frames) {
            if f.shape() != [1, 3, store.manifest.height, store.manifest.width] {
                return Err(EmtError::shape("frame store", format!("frame {:?} vs manifest", f.shape())));
            }
            let _ = slot.set(Arc::new(f));
        }
        Ok(store)
    }

    pub fn manifest(&self) -> &ChunkManifest {
        &self.manifest
    }

    pub fn scale(&self) -> usize {
        self.manifest.scale
    }

    pub fn hr(&self, frame: usize) -> Result<Arc<Tensor>> {
        let slot = self.slot(&self.hr, frame)?;
        if let Some(t) = slot.get() {
            return Ok(t.clone());
        }
        let path = self.manifest.frame_path(frame);
        let img = image::open(&path)
            .map_err(|source| EmtError::Image { path: path.clone(), source })?
            .to_rgb8();
        let t = center_crop(&img, self.manifest.height, self.manifest.width)
            .map_err(|e| EmtError::Dataset(format!("{}: {e}", path.display())))?;
        Ok(slot.get_or_init(|| Arc::new(t)).clone())
    }

    /// Bicubic x(1/scale) of the HR frame, computed once.
    pub fn lr(&self, frame: usize) -> Result<Arc<Tensor>> {
        let slot = self.slot(&self.lr, frame)?;
        if let Some(t) = slot.get() {
            return Ok(t.clone());
        }
        let t = make_lr(&*self.hr(frame)?, self.manifest.scale)?;
        Ok(slot.get_or_init(|| Arc::new(t)).clone())
    }

    pub fn pair(&self, frame: usize) -> Result<FramePair> {
        Ok(FramePair {
            frame_id: frame,
            hr: self.hr(frame)?,
            lr: self.lr(frame)?,
        })
    }

    fn slot<'a>(&self, cells: &'a [OnceLock<Arc<Tensor>>], frame: usize) -> Result<&'a OnceLock<Arc<Tensor>>> {
        cells.get(frame).ok_or(EmtError::IndexOutOfRange {
            index: frame,
            len: cells.len(),
        })
    }
}

pub fn make_lr(hr: &Tensor, scale: usize) -> Result<Tensor> {
    if !(2..=4).contains(&scale) {
        return Err(EmtError::invalid(format!("scale {scale} not in 2..=4")));
    }
    bicubic_resize(hr, ScaleFactor::down(scale as u32))
}

/// Centered `height`x`width` window of an 8-bit RGB image as a 1x3xHxW
/// tensor in [0, 1].
pub fn center_crop(img: &RgbImage, height: usize, width: usize) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if height > h || width > w {
        return Err(EmtError::shape("crop", format!("{height}x{width} from a {h}x{w} image")));
    }
    let (y0, x0) = ((h - height) / 2, (w - width) / 2);
    Ok(Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| {
        img.get_pixel((x0 + x) as u32, (y0 + y) as u32)[c] as f32 / 255.0
    }))
}

/// Quantize a 1x3xHxW tensor in [0, 1] to 8-bit RGB.
pub fn to_rgb_image(t: &Tensor) -> Result<RgbImage> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 3 {
        return Err(EmtError::shape("to_rgb_image", format!("expected 1x3xHxW, got {:?}", t.shape())));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| (t.get(0, ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_frame(path: &Path, t: &Tensor) -> Result<()> {
    let img = to_rgb_image(t)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), format)
        .map_err(|source| EmtError::Image { path: path.to_path_buf(), source })?;
    crate::codec::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(frames: usize, fps: f64, iframes: Vec<usize>) -> ChunkManifest {
        ChunkManifest::in_memory(frames, fps, 2, 8, 8, iframes).unwrap()
    }

    #[test]
    fn chunk_counts() {
        // 45 s and 2 min at 30 fps
        let m = chunkify(&manifest(1350, 30.0, vec![0]), 5.0).unwrap();
        assert_eq!(m.chunk_count(), 9);
        assert!(m.chunks.iter().all(|c| c.len() == 150));
        assert_eq!(chunkify(&manifest(3600, 30.0, vec![0]), 5.0).unwrap().chunk_count(), 24);

        let m = chunkify(&manifest(7, 1.0, vec![0]), 5.0).unwrap();
        assert_eq!(m.chunks, vec![0..5, 5..7]);
        assert_eq!(m.groups, vec![0..2]);
    }

    #[test]
    fn frame_zero_is_always_an_iframe() {
        let m = manifest(20, 1.0, vec![5, 9]);
        assert_eq!(m.iframes, vec![0, 5, 9]);
        assert!(ChunkManifest::in_memory(20, 1.0, 2, 8, 8, vec![5, 5]).is_err());
        assert!(ChunkManifest::in_memory(20, 1.0, 2, 8, 8, vec![0, 20]).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut m = chunkify(&manifest(23, 6.0, vec![0, 7, 12]), 1.5).unwrap();
        m.root = PathBuf::from("/tmp/some dir/frames");
        m.groups = group_long_video(&m, 2).unwrap();
        let text = m.to_text();
        let back = ChunkManifest::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert!(ChunkManifest::from_text(&text.replace("scale 2", "scale x")).is_err());
    }

    #[test]
    fn grouping() {
        // one I-frame at the start of each chunk
        let mut m = manifest(31, 1.0, (0..31).collect());
        m = chunkify(&m, 1.0).unwrap();
        assert_eq!(group_long_video(&m, 30).unwrap(), vec![0..30, 30..31]);
        let m30 = chunkify(&manifest(30, 1.0, (0..30).collect()), 1.0).unwrap();
        assert_eq!(group_long_video(&m30, 30).unwrap(), vec![0..30]);

        // boundary I-frame 4 sits inside chunk 1 (frames 3..6): snap back
        let m = chunkify(&manifest(12, 1.0, vec![0, 2, 4, 7, 10]), 3.0).unwrap();
        let groups = group_long_video(&m, 2).unwrap();
        assert_eq!(groups, vec![0..1, 1..3, 3..4]);
        assert!(group_long_video(&m, 0).is_err());
    }

    #[test]
    fn iframe_chunk_lookup() {
        let m = chunkify(&manifest(12, 1.0, vec![0, 2, 4, 7, 10]), 3.0).unwrap();
        assert_eq!(m.iframe_chunks(), vec![0, 0, 1, 2, 3]);
        assert_eq!(m.iframes_in(1), vec![4]);
        assert_eq!(m.chunk_of(11), Some(3));
    }
}
