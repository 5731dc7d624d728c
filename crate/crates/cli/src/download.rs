//! Opt-in fetch of the CIFAR-10 binary archive.

use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flate2::read::GzDecoder;
use log::info;
use sparsetrain::data;

pub const ARCHIVE_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";

/// Makes sure `dir` holds the six binary batch files, downloading and
/// unpacking the official archive if any is missing.
pub fn ensure_cifar10(dir: &Path) -> Result<()> {
    if data::cifar_files(dir).iter().all(|p| p.is_file()) {
        info!("CIFAR-10 already present in {}", dir.display());
        return Ok(());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    info!("downloading {ARCHIVE_URL}");
    let response = ureq::get(ARCHIVE_URL).call().context("requesting the CIFAR-10 archive")?;
    let mut archive = Vec::new();
    response.into_reader().read_to_end(&mut archive).context("reading the CIFAR-10 archive")?;
    unpack(&archive, dir)
}

/// Extracts the `.bin` members of the archive flat into `dir`.
fn unpack(archive: &[u8], dir: &Path) -> Result<()> {
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut written = 0;
    for entry in tar.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.ends_with(".bin") {
            continue;
        }
        entry.unpack(dir.join(name))?;
        written += 1;
    }
    if !data::cifar_files(dir).iter().all(|p| p.is_file()) {
        bail!("archive unpacked {written} files but the batch set in {} is incomplete", dir.display());
    }
    info!("unpacked {written} files into {}", dir.display());
    Ok(())
}
