//! The standard Omniglot directory layout:
//! `images_background/<alphabet>/characterNN/*.png` for the 30 training
//! alphabets and `images_evaluation/...` for the 20 test alphabets.

use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::IMAGE_PIXELS;
use crate::error::{Error, Result};

use super::dataset::{ClassInfo, Dataset, Split};
use super::preprocess::preprocess;

pub const RAW_SIDE: usize = 105;
pub const EXAMPLES_PER_CLASS: usize = 20;

/// Training alphabets and their character counts (964 in total).
pub const BACKGROUND_ALPHABETS: [(&str, usize); 30] = [
    ("Alphabet_of_the_Magi", 20),
    ("Anglo-Saxon_Futhorc", 29),
    ("Arcadian", 26),
    ("Armenian", 41),
    ("Asomtavruli_(Georgian)", 40),
    ("Balinese", 24),
    ("Bengali", 46),
    ("Blackfoot_(Canadian_Aboriginal_Syllabics)", 14),
    ("Braille", 26),
    ("Burmese_(Myanmar)", 34),
    ("Cyrillic", 33),
    ("Early_Aramaic", 22),
    ("Futurama", 26),
    ("Grantha", 43),
    ("Greek", 24),
    ("Gujarati", 48),
    ("Hebrew", 22),
    ("Inuktitut_(Canadian_Aboriginal_Syllabics)", 16),
    ("Japanese_(hiragana)", 52),
    ("Japanese_(katakana)", 47),
    ("Korean", 40),
    ("Latin", 26),
    ("Malay_(Jawi_-_Arabic)", 40),
    ("Mkhedruli_(Georgian)", 41),
    ("N_Ko", 33),
    ("Ojibwe_(Canadian_Aboriginal_Syllabics)", 14),
    ("Sanskrit", 42),
    ("Syriac_(Estrangelo)", 23),
    ("Tagalog", 17),
    ("Tifinagh", 55),
];

/// Test alphabets and their character counts (659 in total).
pub const EVALUATION_ALPHABETS: [(&str, usize); 20] = [
    ("Angelic", 20),
    ("Atemayar_Qelisayer", 26),
    ("Atlantean", 26),
    ("Aurek-Besh", 26),
    ("Avesta", 26),
    ("Ge_ez", 26),
    ("Glagolitic", 45),
    ("Gurmukhi", 45),
    ("Kannada", 41),
    ("Keble", 26),
    ("Malayalam", 47),
    ("Manipuri", 40),
    ("Mongolian", 30),
    ("Old_Church_Slavonic_(Cyrillic)", 45),
    ("Oriya", 46),
    ("Sylheti", 28),
    ("Syriac_(Serto)", 23),
    ("Tengwar", 25),
    ("Tibetan", 42),
    ("ULOG", 26),
];

/// How strictly [`ingest`] checks the tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestMode {
    /// Exactly the standard alphabets with their character counts.
    Standard,
    /// Any alphabets; only the per-class example count is checked.
    Lenient,
}

/// One character class on disk, files sorted by name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawClass {
    pub alphabet: String,
    pub character: String,
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Omniglot {
    pub root: PathBuf,
    pub train: Vec<RawClass>,
    pub test: Vec<RawClass>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub pixels: Vec<u8>,
    pub alphabet: String,
    pub character: String,
    pub drawer: usize,
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn scan_split(dir: &Path, problems: &mut Vec<String>) -> Result<Vec<(String, Vec<RawClass>)>> {
    let mut alphabets = Vec::new();
    for alpha_dir in sorted_entries(dir, true)? {
        let alphabet = file_name(&alpha_dir);
        let mut classes = Vec::new();
        for char_dir in sorted_entries(&alpha_dir, true)? {
            let files: Vec<PathBuf> = sorted_entries(&char_dir, false)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            let character = file_name(&char_dir);
            if files.len() != EXAMPLES_PER_CLASS {
                problems.push(format!(
                    "{alphabet}/{character} has {} images, expected {EXAMPLES_PER_CLASS}",
                    files.len()
                ));
            }
            classes.push(RawClass { alphabet: alphabet.clone(), character, files });
        }
        alphabets.push((alphabet, classes));
    }
    Ok(alphabets)
}

fn check_standard(found: &[(String, Vec<RawClass>)], table: &[(&str, usize)], split: &str, problems: &mut Vec<String>) {
    for (name, count) in table {
        match found.iter().find(|(a, _)| a == name) {
            None => problems.push(format!("{split}: missing alphabet {name}")),
            Some((_, classes)) if classes.len() != *count => problems.push(format!(
                "{split}: alphabet {name} has {} characters, expected {count}",
                classes.len()
            )),
            Some(_) => {}
        }
    }
    for (a, _) in found {
        if !table.iter().any(|(name, _)| name == a) {
            problems.push(format!("{split}: unexpected alphabet {a}"));
        }
    }
}

/// Discovers the train and test classes under `root`. All discrepancies
/// are collected and reported together.
pub fn ingest(root: &Path, mode: IngestMode) -> Result<Omniglot> {
    let mut problems = Vec::new();
    let mut splits = Vec::new();
    for (sub, table) in [
        ("images_background", &BACKGROUND_ALPHABETS[..]),
        ("images_evaluation", &EVALUATION_ALPHABETS[..]),
    ] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            problems.push(format!("missing directory {sub}"));
            splits.push(Vec::new());
            continue;
        }
        let found = scan_split(&dir, &mut problems)?;
        if found.is_empty() {
            problems.push(format!("{sub} contains no alphabets"));
        }
        if mode == IngestMode::Standard {
            check_standard(&found, table, sub, &mut problems);
        }
        splits.push(found.into_iter().flat_map(|(_, c)| c).collect());
    }
    let train_alpha: Vec<&str> = splits[0].iter().map(|c: &RawClass| c.alphabet.as_str()).collect();
    for c in &splits[1] {
        if train_alpha.contains(&c.alphabet.as_str()) {
            problems.push(format!("alphabet {} appears in both splits", c.alphabet));
            break;
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingest { root: root.to_path_buf(), problems });
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Omniglot { root: root.to_path_buf(), train, test })
}

/// Decodes one image as 8-bit grayscale and checks its size.
pub fn load_raw(path: &Path, alphabet: &str, character: &str, drawer: usize) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_luma8();
    if img.width() as usize != RAW_SIDE || img.height() as usize != RAW_SIDE {
        return Err(Error::Ingest {
            root: path.to_path_buf(),
            problems: vec![format!("image is {}x{}, expected {RAW_SIDE}x{RAW_SIDE}", img.width(), img.height())],
        });
    }
    Ok(RawImage { pixels: img.into_raw(), alphabet: alphabet.into(), character: character.into(), drawer })
}

/// Loads and preprocesses every image of the given classes.
pub fn prepare_split(classes: &[RawClass], split: Split) -> Result<Dataset> {
    let mut infos = Vec::with_capacity(classes.len());
    let mut pixels = Vec::with_capacity(classes.len() * EXAMPLES_PER_CLASS * IMAGE_PIXELS);
    for class in classes {
        for (drawer, file) in class.files.iter().enumerate() {
            let raw = load_raw(file, &class.alphabet, &class.character, drawer)?;
            pixels.extend(preprocess(&raw.pixels, RAW_SIDE));
        }
        infos.push(ClassInfo::new(&class.alphabet, &class.character, 0));
    }
    Dataset::new(split, EXAMPLES_PER_CLASS, infos, pixels)
}
