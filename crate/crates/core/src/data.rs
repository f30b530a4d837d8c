//! Samples, loaders, synthetic generators and the attack-oriented split.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub pixels: Vec<f64>,
    pub label: usize,
    pub source_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub source_id: u64,
}

/// Common view over image and text samples.
pub trait Sample: Clone + Send + Sync {
    fn label(&self) -> usize;
    fn source_id(&self) -> u64;
}

impl Sample for ImageSample {
    fn label(&self) -> usize {
        self.label
    }
    fn source_id(&self) -> u64 {
        self.source_id
    }
}

impl Sample for TextRecord {
    fn label(&self) -> usize {
        self.label
    }
    fn source_id(&self) -> u64 {
        self.source_id
    }
}

pub const PAD_INDEX: usize = 0;
pub const UNKNOWN_INDEX: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_strings: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            token_strings: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNKNOWN_TOKEN);
        v
    }

    /// Returns the index of `word`, adding it if unseen.
    pub fn insert(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        let i = self.token_strings.len();
        self.token_strings.push(word.to_string());
        self.index.insert(word.to_string(), i);
        i
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNKNOWN_INDEX)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.token_strings.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.token_strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_strings.is_empty()
    }

    pub fn pad_index(&self) -> usize {
        PAD_INDEX
    }

    pub fn unknown_index(&self) -> usize {
        UNKNOWN_INDEX
    }

    /// Lowercased whitespace tokenization, padded or truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut tokens: Vec<usize> = text
            .split_whitespace()
            .take(max_len)
            .map(|w| self.lookup(&w.to_lowercase()))
            .collect();
        tokens.resize(max_len, PAD_INDEX);
        tokens
    }

    /// Joins tokens with spaces after dropping trailing pads.
    pub fn decode(&self, tokens: &[usize]) -> String {
        strip_trailing_pads(tokens)
            .iter()
            .map(|&t| self.token(t).unwrap_or(UNKNOWN_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn strip_trailing_pads(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().rposition(|&t| t != PAD_INDEX).map_or(0, |p| p + 1);
    &tokens[..end]
}

/// Mean of the components, accumulated left to right exactly like a crafted
/// first-layer row of `1/d` weights.
pub fn brightness(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Shape("brightness of an empty vector".into()));
    }
    let inv = 1.0 / x.len() as f64;
    let mut acc = 0.0;
    for v in x {
        acc += v * inv;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// IDX

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(name, format!("truncated header at byte offset {offset}")))
}

/// Parses an IDX image container into `(rows, cols, per-image bytes)`.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = read_u32_be(bytes, 0, name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            name,
            format!("bad magic 0x{magic:08x} at byte offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let count = read_u32_be(bytes, 4, name)? as usize;
    let rows = read_u32_be(bytes, 8, name)? as usize;
    let cols = read_u32_be(bytes, 12, name)? as usize;
    let size = rows * cols;
    let need = 16 + count * size;
    if bytes.len() < need {
        return Err(Error::format(
            name,
            format!(
                "truncated payload at byte offset {}: expected {need} bytes",
                bytes.len()
            ),
        ));
    }
    let images = bytes[16..need]
        .chunks(size.max(1))
        .take(count)
        .map(<[u8]>::to_vec)
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            name,
            format!("bad magic 0x{magic:08x} at byte offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let count = read_u32_be(bytes, 4, name)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::format(
            name,
            format!(
                "truncated payload at byte offset {}: expected {} bytes",
                bytes.len(),
                8 + count
            ),
        ));
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Loads an IDX image file together with its label file.
pub fn load_idx_images(images: &Path, labels: &Path, normalize: bool) -> Result<Vec<ImageSample>> {
    let iname = images.display().to_string();
    let lname = labels.display().to_string();
    let (_, _, raw) = parse_idx_images(&fs::read(images)?, &iname)?;
    let lab = parse_idx_labels(&fs::read(labels)?, &lname)?;
    if lab.len() != raw.len() {
        return Err(Error::format(
            lname,
            format!(
                "label count {} does not match image count {} (byte offset 4)",
                lab.len(),
                raw.len()
            ),
        ));
    }
    let div = if normalize { 255.0 } else { 1.0 };
    Ok(raw
        .into_iter()
        .zip(lab)
        .enumerate()
        .map(|(i, (px, l))| ImageSample {
            pixels: px.iter().map(|&b| b as f64 / div).collect(),
            label: l as usize,
            source_id: i as u64,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// PGM

#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_pgm(bytes: &[u8], name: &str) -> Result<Pgm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(name, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        if fields.len() == 1 && fields[0] != "P5" {
            return Err(Error::format(name, format!("not a P5 PGM (magic {:?})", fields[0])));
        }
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(name, format!("invalid {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            name,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::format(
            name,
            format!("truncated raster at byte offset {}", bytes.len()),
        ));
    }
    Ok(Pgm {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn encode_pgm(side_w: usize, side_h: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{side_w} {side_h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, side: usize, pixels: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(side, pixels.len() / side.max(1), pixels))?;
    Ok(())
}

/// Center-crops to a square and resizes by nearest neighbour.
fn crop_resize(img: &Pgm, side: usize) -> Vec<f64> {
    let sq = img.width.min(img.height);
    let x0 = (img.width - sq) / 2;
    let y0 = (img.height - sq) / 2;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let sy = y0 + (r * sq) / side;
        for c in 0..side {
            let sx = x0 + (c * sq) / side;
            out.push(img.pixels[sy * img.width + sx] as f64 / 255.0);
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| !e.file_name().to_string_lossy().starts_with('.'))
        .collect();
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Loads `dir/<class>/<file>.pgm`; class labels follow sorted directory names.
pub fn load_image_dir(dir: &Path, side: usize) -> Result<Vec<ImageSample>> {
    if side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    let mut out = Vec::new();
    let classes: Vec<_> = sorted_entries(dir)?.into_iter().filter(|e| e.path().is_dir()).collect();
    for (label, class_dir) in classes.iter().enumerate() {
        for file in sorted_entries(&class_dir.path())? {
            let path = file.path();
            if !path.is_file() {
                continue;
            }
            let img = parse_pgm(&fs::read(&path)?, &path.display().to_string())?;
            out.push(ImageSample {
                pixels: crop_resize(&img, side),
                label,
                source_id: out.len() as u64,
            });
        }
    }
    Ok(out)
}

/// Writes images as `dir/<label>/<source_id>.pgm`.
pub fn write_image_dir(dir: &Path, side: usize, samples: &[ImageSample]) -> Result<()> {
    for s in samples {
        let class_dir = dir.join(format!("{:03}", s.label));
        fs::create_dir_all(&class_dir)?;
        write_pgm(&class_dir.join(format!("{:08}.pgm", s.source_id)), side, &s.pixels)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Text

/// Parses `<label>\t<text>` lines. Blank lines are skipped.
pub fn parse_text_corpus(text: &str, max_len: usize, name: &str) -> Result<(Vec<TextRecord>, Vocabulary)> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let mut vocab = Vocabulary::new();
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(name, format!("line {}: missing tab separator", lineno + 1)))?;
        let label = label
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::format(name, format!("line {}: invalid label {label:?}", lineno + 1)))?;
        let mut tokens: Vec<usize> = body
            .split_whitespace()
            .map(|w| vocab.insert(&w.to_lowercase()))
            .collect();
        tokens.truncate(max_len);
        tokens.resize(max_len, PAD_INDEX);
        records.push(TextRecord {
            tokens,
            label,
            source_id: records.len() as u64,
        });
    }
    Ok((records, vocab))
}

pub fn load_text_corpus(path: &Path, max_len: usize) -> Result<(Vec<TextRecord>, Vocabulary)> {
    let text = fs::read_to_string(path)?;
    parse_text_corpus(&text, max_len, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Synthetic data

const IMAGE_DOMAIN: u64 = 0x696d_6167;
const TEXT_DOMAIN: u64 = 0x7465_7874;

fn index_rng(seed: u64, index: u64, domain: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&domain.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Deterministic grayscale images: a class-oriented smooth gradient, a few
/// soft blobs and pixel noise. Image `i` depends only on `(seed, i)`.
pub fn synth_images(count: usize, side: usize, classes: usize, seed: u64) -> Vec<ImageSample> {
    let classes = classes.max(1);
    (0..count)
        .map(|i| {
            let mut rng = index_rng(seed, i as u64, IMAGE_DOMAIN);
            let label = rng.gen_range(0..classes);
            let angle = std::f64::consts::PI * label as f64 / classes as f64;
            let (ca, sa) = (angle.cos(), angle.sin());
            let base = rng.gen_range(0.15..0.75);
            let slope = rng.gen_range(0.05..0.25);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..=4))
                .map(|_| {
                    (
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.06..0.25),
                        rng.gen_range(-0.35..0.35),
                    )
                })
                .collect();
            let denom = (side.max(2) - 1) as f64;
            let mut pixels = Vec::with_capacity(side * side);
            for r in 0..side {
                for c in 0..side {
                    let (y, x) = (r as f64 / denom, c as f64 / denom);
                    let t = (x - 0.5) * ca + (y - 0.5) * sa;
                    let mut v = base + slope * t;
                    for &(bx, by, rad, amp) in &blobs {
                        let d2 = (x - bx).powi(2) + (y - by).powi(2);
                        v += amp * (-d2 / (2.0 * rad * rad)).exp();
                    }
                    v += rng.gen_range(-0.02..0.02);
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
            ImageSample {
                pixels,
                label,
                source_id: i as u64,
            }
        })
        .collect()
}

/// Builds pseudo-words from syllables so synthetic corpora read like text.
fn synth_word(index: usize) -> String {
    const SYL: [&str; 24] = [
        "ra", "to", "me", "si", "lu", "ka", "no", "pe", "di", "va", "zo", "gri", "hal", "ben", "cor", "dus", "fen",
        "mir", "tas", "lo", "qui", "sen", "tro", "ul",
    ];
    let mut n = index;
    let mut w = String::new();
    loop {
        w.push_str(SYL[n % SYL.len()]);
        n /= SYL.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    w
}

/// Deterministic `<label>\t<text>` corpus lines with Zipf-distributed,
/// class-shifted word frequencies and lengths in `min_len..=max_len`.
pub fn synth_text_lines(
    count: usize,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    classes: usize,
    seed: u64,
) -> Vec<String> {
    let vocab_size = vocab_size.max(1);
    let classes = classes.max(1);
    let mut cumulative = Vec::with_capacity(vocab_size);
    let mut total = 0.0;
    for r in 0..vocab_size {
        total += 1.0 / (r as f64 + 1.0);
        cumulative.push(total);
    }
    (0..count)
        .map(|i| {
            let mut rng = index_rng(seed, i as u64, TEXT_DOMAIN);
            let label = rng.gen_range(0..classes);
            let len = rng.gen_range(min_len..=max_len.max(min_len));
            let shift = label * vocab_size / classes;
            let words: Vec<String> = (0..len)
                .map(|_| {
                    let u = rng.gen_range(0.0..total);
                    let rank = cumulative.partition_point(|&c| c < u).min(vocab_size - 1);
                    synth_word((rank + shift) % vocab_size)
                })
                .collect();
            format!("{label}\t{}", words.join(" "))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Split

/// How the victim's pool is drawn from the non-auxiliary samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    #[default]
    Iid,
    /// A `fraction` of the victim's pool is drawn from `class` only.
    VictimClass { class: usize, fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<S> {
    pub auxiliary: Vec<S>,
    /// One pool per client, indexed by client.
    pub pools: Vec<Vec<S>>,
    pub victim: usize,
}

impl<S> DatasetSplit<S> {
    pub fn victim_pool(&self) -> &[S] {
        &self.pools[self.victim]
    }

    pub fn honest_pools(&self) -> impl Iterator<Item = (usize, &Vec<S>)> {
        let victim = self.victim;
        self.pools.iter().enumerate().filter(move |(i, _)| *i != victim)
    }
}

/// Shuffles, carves off the auxiliary set, and deals the remainder into
/// `clients` contiguous pools (the first pools absorb any remainder).
pub fn split_for_attack<S: Sample>(
    samples: &[S],
    aux_fraction: f64,
    clients: usize,
    victim: usize,
    seed: u64,
    partition: Partition,
) -> Result<DatasetSplit<S>> {
    if !(aux_fraction > 0.0 && aux_fraction < 1.0) {
        return Err(Error::Config(format!("aux_fraction {aux_fraction} not in (0,1)")));
    }
    if clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    if victim >= clients {
        return Err(Error::Index(format!("victim {victim} >= client count {clients}")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_aux = (aux_fraction * samples.len() as f64).round() as usize;
    let auxiliary = order[..n_aux].iter().map(|&i| samples[i].clone()).collect();
    let mut rest: Vec<usize> = order[n_aux..].to_vec();

    let base = rest.len() / clients;
    let extra = rest.len() % clients;
    let sizes: Vec<usize> = (0..clients).map(|c| base + usize::from(c < extra)).collect();

    if let Partition::VictimClass { class, fraction } = partition {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("non-iid fraction {fraction} not in [0,1]")));
        }
        // Move the chosen samples to the victim's slot, preserving shuffle order.
        let size = sizes[victim];
        let want = (fraction * size as f64).round() as usize;
        let mut chosen: Vec<usize> = rest
            .iter()
            .copied()
            .filter(|&i| samples[i].label() == class)
            .take(want)
            .collect();
        let mut taken: std::collections::HashSet<usize> = chosen.iter().copied().collect();
        for &i in &rest {
            if chosen.len() >= size {
                break;
            }
            if !taken.contains(&i) {
                chosen.push(i);
                taken.insert(i);
            }
        }
        let others: Vec<usize> = rest.iter().copied().filter(|i| !taken.contains(i)).collect();
        let start: usize = sizes[..victim].iter().sum();
        rest = others[..start.min(others.len())].to_vec();
        rest.extend(chosen);
        rest.extend(others[start.min(others.len())..].iter().copied());
    }

    let mut pools = Vec::with_capacity(clients);
    let mut offset = 0;
    for size in sizes {
        pools.push(
            rest[offset..offset + size]
                .iter()
                .map(|&i| samples[i].clone())
                .collect(),
        );
        offset += size;
    }
    Ok(DatasetSplit {
        auxiliary,
        pools,
        victim,
    })
}
