//! Server/client round protocol, aggregation, wire format and communication accounting.

pub mod aggregate;
pub mod audit;
pub mod comm;
pub mod protocol;
pub mod wire;

pub use aggregate::{aggregate_params, aggregate_prototypes, client_weight, AggregationMode, ClientUpdate};
pub use audit::{check_audit, AuditEvent, AuditExpectations, AuditLog, AuditRecord, AuditSummary, AUDIT_HEADER};
pub use comm::{comm_cost, CommCost, UpdateShape};
pub use protocol::{
    run_experiment, select_clients, AblationFlags, ClientState, ExperimentSetup, Federation, GlobalState, Outcome,
    ProtocolConfig, RoundReport, Upload,
};
pub use wire::{decode, encode, header_bytes, Payload, PayloadKind};
