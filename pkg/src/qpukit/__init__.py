"""Composable query processing units on a simulated multi-site network."""

from .core import (
    Capability,
    Client,
    ErrorCode,
    LogicalTimestamp,
    Mode,
    QPU,
    QpuError,
    QpuRef,
    Query,
    RecordKind,
    Row,
    Runtime,
    StreamHandle,
    StreamRecord,
    match_capability,
    serialized_size,
)
from .simnet import Meter, NetworkModel, Scheduler, Site, SiteKind
from .storage import ADS, PRICES, Store, TableDef, WriteOp
from .topology import Deployment, ParseError, TopologySpec, deploy, load_topology, parse_topology, validate
from .workload import (
    FIXTURE,
    MetricsReport,
    WorkloadSpec,
    generate,
    oracle_eval,
    run_experiment,
    sweep,
)

__version__ = "0.1.0"
