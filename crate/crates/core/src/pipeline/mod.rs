//! Pilot log pipeline: record schema, shipper and sink.

pub mod record;
pub mod shipper;
pub mod sink;

pub use record::{parse_line, FieldError, PilotLogRecord, Severity};
pub use shipper::{ship_file, ship_lines, LogTransport, MqTransport, PilotIdentity, ShipError, ShipOptions, ShipReport};
pub use sink::{run_sink, SinkOptions, SinkStats, SinkWriter, WriteOutcome};
