use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::Args;
use en_core::domain::{RegionId, Timestamp, SECS_PER_INTERVAL};
use en_core::registry::Registry;
use en_core::service::{run_node, BackendNode, BackendNodeConfig, Clock, NodeHandler, SystemClock};
use en_net::{TlsIdentity, TlsServer, TlsTransport};
use log::info;

use crate::ClockKind;

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Region the config must describe.
    #[arg(long)]
    region: Option<RegionId>,
    /// Node configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Listen address, overriding the config's `listen`.
    #[arg(long)]
    listen: Option<String>,
    /// Registry file used to resolve peers and the trusted root.
    #[arg(long)]
    registry: Option<PathBuf>,
}

/// Wall-clock start, then one build interval per real second.
struct FastClock {
    origin: Timestamp,
    started: Instant,
}

impl Clock for FastClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.origin.secs() + self.started.elapsed().as_secs() * SECS_PER_INTERVAL)
    }
}

pub fn run(args: ServeArgs, clock: ClockKind) -> Result<bool> {
    let mut config = BackendNodeConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(region) = args.region {
        if region != config.region {
            bail!("{} configures region {}, not {region}", args.config.display(), config.region);
        }
    }
    if let Some(listen) = args.listen {
        config.listen = Some(listen);
    }
    let Some(listen) = config.listen.clone() else {
        bail!("no listen address: set `listen` in the config or pass --listen");
    };
    let Some(tls) = config.tls.clone() else {
        bail!("serving needs a [tls] table in the config");
    };
    let registry = match &args.registry {
        Some(path) => Some(Registry::load(path).with_context(|| format!("loading {}", path.display()))?),
        None => None,
    };

    let trusted_root = tls.trusted_root(registry.as_ref())?;
    let identity = TlsIdentity::new(tls.chain()?, &tls.key()?)?;
    let node = Arc::new(BackendNode::new(&config, registry.as_ref())?);
    let transport = TlsTransport::new(trusted_root)?;
    let credentials: BTreeSet<&str> = node.peers().iter().map(|p| p.tls_consumer_certificate.as_str()).collect();
    for name in credentials {
        transport.add_credential(name, &identity)?;
    }

    let clock: Arc<dyn Clock> = match clock {
        ClockKind::Real => Arc::new(SystemClock),
        ClockKind::Simulated => Arc::new(FastClock {
            origin: SystemClock.now(),
            started: Instant::now(),
        }),
    };
    let handler = Arc::new(NodeHandler::new(node.clone(), clock.clone()));
    let server = TlsServer::bind(&listen, &identity, trusted_root, handler)?;
    let _cadence = run_node(node.clone(), clock, Arc::new(transport), Duration::from_secs(1));
    info!("{}: serving {} peers", node.region(), node.peers().len());
    println!("{} listening on {}", node.region(), server.base_url());
    std::io::stdout().flush()?;
    loop {
        std::thread::park();
    }
}
