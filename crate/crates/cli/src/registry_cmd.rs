use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use ed25519_dalek::VerifyingKey;
use en_core::registry::{Registration, Registry, RegistryEntry};

#[derive(Debug, Subcommand)]
pub enum RegistryCommand {
    /// Create an empty registry file trusting the given root key.
    Init {
        file: PathBuf,
        /// Hex-encoded ed25519 public key of the root authority.
        #[arg(long)]
        root_key: String,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Verify an entry and add it, replacing any entry for the same region.
    Add {
        file: PathBuf,
        /// File holding one hex-encoded registry entry.
        entry: PathBuf,
    },
    /// Check every entry against the trusted root.
    Verify { file: PathBuf },
    /// Print one line per registered backend.
    List { file: PathBuf },
}

pub fn run(cmd: RegistryCommand) -> Result<bool> {
    match cmd {
        RegistryCommand::Init { file, root_key, force } => {
            if file.exists() && !force {
                bail!("{} already exists (use --force to overwrite)", file.display());
            }
            let bytes: [u8; 32] = hex::decode(root_key.trim())
                .ok()
                .and_then(|b| b.try_into().ok())
                .context("root key must be 32 hex-encoded bytes")?;
            let root = VerifyingKey::from_bytes(&bytes).context("root key is not a valid ed25519 key")?;
            Registry::new(root).save(&file)?;
            println!("created {}", file.display());
            Ok(true)
        }
        RegistryCommand::Add { file, entry } => {
            let registry = Registry::load(&file).with_context(|| format!("loading {}", file.display()))?;
            let text = fs::read_to_string(&entry).with_context(|| format!("reading {}", entry.display()))?;
            let bytes = hex::decode(text.trim()).context("entry is not hex")?;
            let entry = RegistryEntry::decode(&bytes)?;
            let region = entry.record.region;
            match registry.register_backend(entry.record, entry.chain) {
                Registration::Accepted => {
                    registry.save(&file)?;
                    println!("added {region}");
                    Ok(true)
                }
                Registration::Rejected(reason) => {
                    eprintln!("rejected {region}: {reason}");
                    Ok(false)
                }
            }
        }
        RegistryCommand::Verify { file } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let (registry, rejected) = Registry::parse_lenient(&text)?;
            for err in &rejected {
                eprintln!("invalid: {err}");
            }
            println!(
                "{}: {} valid, {} invalid, root {}",
                file.display(),
                registry.entries().len(),
                rejected.len(),
                hex::encode(registry.trusted_root().as_bytes())
            );
            Ok(rejected.is_empty())
        }
        RegistryCommand::List { file } => {
            let registry = Registry::load(&file).with_context(|| format!("loading {}", file.display()))?;
            for entry in registry.entries() {
                let r = &entry.record;
                let offered: Vec<String> = r.replication_offered.iter().map(ToString::to_string).collect();
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    r.region,
                    r.cluster.as_deref().unwrap_or("-"),
                    r.vendor,
                    r.base_url,
                    offered.join(","),
                    hex::encode(r.feed_verification_key.as_bytes())
                );
            }
            Ok(true)
        }
    }
}
