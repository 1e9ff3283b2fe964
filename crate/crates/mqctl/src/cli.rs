use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mqctl", version, about = "Message-queue toolkit command line")]
pub struct Cli {
    /// JSON config file holding Resources, Broker and Gateway sections.
    #[arg(long, global = true, env = "MQCONFIG")]
    pub config: Option<PathBuf>,

    /// More diagnostics on stderr (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Send one JSON message to a destination.
    Produce(ProduceArgs),
    /// Print one JSON line per received message.
    Consume(ConsumeArgs),
    /// Run the embedded broker.
    Broker(BrokerArgs),
    /// Run the HTTP log gateway.
    Gateway(GatewayArgs),
    /// Ship a pilot log to the gateway or straight to a queue.
    ShipLogs(ShipArgs),
    /// Store pilot log records from a destination as one file per pilot.
    Sink(SinkArgs),
    /// Print a gateway token entry (salted hash) for the config file.
    HashToken(HashTokenArgs),
    /// Check the config file and list every violation.
    Validate,
}

#[derive(Debug, Args)]
pub struct ProduceArgs {
    /// Pseudo-URL `<service>::<Queue|Topic>::<name>` or a unique shorthand.
    #[arg(long)]
    pub dest: String,
    /// JSON payload; read from stdin when absent.
    #[arg(long)]
    pub message: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConsumeArgs {
    #[arg(long)]
    pub dest: String,
    /// Stop after this many messages.
    #[arg(long)]
    pub count: Option<u64>,
    /// Fail at once (exit 3) instead of retrying the first connection.
    #[arg(long)]
    pub no_retry: bool,
    /// Print the whole envelope instead of the payload.
    #[arg(long)]
    pub envelope: bool,
}

#[derive(Debug, Args)]
pub struct BrokerArgs {
    /// Overrides Broker.Listen.
    #[arg(long)]
    pub listen: Option<SocketAddr>,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    /// Overrides Gateway.Listen.
    #[arg(long)]
    pub listen: Option<SocketAddr>,
}

#[derive(Debug, Args)]
pub struct ShipArgs {
    /// Log file, or `-` for stdin.
    #[arg(long, default_value = "-")]
    pub source: String,
    /// Gateway base URL, e.g. http://gw.example:8080.
    #[arg(long, conflicts_with = "dest", required_unless_present = "dest")]
    pub gateway: Option<String>,
    /// Secret reference for the bearer token (env:VAR or file:path#key).
    #[arg(long, requires = "gateway")]
    pub token_ref: Option<String>,
    /// Ship straight to this destination instead of the gateway.
    #[arg(long)]
    pub dest: Option<String>,
    /// Spool directory for direct shipping.
    #[arg(long, requires = "dest")]
    pub spool_dir: Option<PathBuf>,
    /// Defaults to $PILOT_UUID, else a fresh random id.
    #[arg(long)]
    pub pilot_uuid: Option<String>,
    /// Host or CE label; defaults to the host name.
    #[arg(long)]
    pub source_label: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub batch_interval_ms: u64,
}

#[derive(Debug, Args)]
pub struct SinkArgs {
    #[arg(long)]
    pub dest: String,
    /// Output directory, one `<pilot_uuid>.log` per pilot.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HashTokenArgs {
    #[arg(long)]
    pub principal: String,
    /// Secret reference holding the token (env:VAR or file:path#key).
    #[arg(long)]
    pub token_ref: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ship_needs_exactly_one_target() {
        assert!(Cli::try_parse_from(["mqctl", "ship-logs"]).is_err());
        assert!(Cli::try_parse_from(["mqctl", "ship-logs", "--gateway", "http://x", "--dest", "a::Queue::b"]).is_err());
        assert!(Cli::try_parse_from(["mqctl", "ship-logs", "--dest", "a::Queue::b"]).is_ok());
    }

    #[test]
    fn verbose_counts() {
        let cli = Cli::try_parse_from(["mqctl", "-vv", "validate"]).unwrap();
        assert_eq!(cli.verbose, 2);
    }
}
