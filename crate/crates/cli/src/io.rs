use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{Context, Result};

const BATCH: usize = 512;

pub fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Box::new(BufReader::new(file)))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    let mut text = String::new();
    open_input(path)?
        .read_to_string(&mut text)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(text)
}

/// `None` or `-` means standard output.
pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
        Some(p) if p == Path::new("-") => Ok(Box::new(BufWriter::new(io::stdout()))),
        Some(p) => {
            let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(file)))
        }
    }
}

/// A non-blank input line with its 1-based line number.
pub struct Line {
    pub number: usize,
    pub text: String,
}

/// Feeds non-blank lines to `f` in fixed-size batches so large corpora are
/// never held in memory at once.
pub fn for_each_batch(input: Box<dyn BufRead>, mut f: impl FnMut(Vec<Line>) -> Result<()>) -> Result<()> {
    let mut batch = Vec::with_capacity(BATCH);
    for (n, line) in input.lines().enumerate() {
        let text = line.with_context(|| format!("reading line {}", n + 1))?;
        if text.trim().is_empty() {
            continue;
        }
        batch.push(Line { number: n + 1, text });
        if batch.len() == BATCH {
            f(std::mem::replace(&mut batch, Vec::with_capacity(BATCH)))?;
        }
    }
    if !batch.is_empty() {
        f(batch)?;
    }
    Ok(())
}
