"""Resource-aware vision kernels on a simulated many-core runtime.

The package couples a claim-based resource runtime (invade / infect /
retreat) with two kernels whose work can be scaled to the processing
elements actually granted: a Harris corner detector that prunes pixels by a
cheap pre-response, and a kd-tree best-bin-first matcher that adapts its
leaf budget.
"""

from .harris import (
    AdaptiveResult,
    Corner,
    FrameSkip,
    corner_response,
    detect_adaptive,
    detect_conventional,
    gradients,
    non_max_suppression,
    select_cr_threshold,
    structure_tensor,
)
from .kdtree import (
    DescriptorSet,
    InfeasibleBudget,
    KdTree,
    NNResult,
    SearchBudget,
    adapt_leaf_count,
    build,
    calibrate_tfp,
    exact_nn,
    match_features,
    nn_search,
    required_pes,
)
from .metrics import FrameRecord, RunSummary, precision_recall, summarize
from .runtime import (
    ClaimState,
    LoadTrace,
    ParallelEfficiency,
    ResourceClaim,
    ResourceRequest,
    ResourceRuntime,
    RuntimeStateError,
    Topology,
    Workload,
)
from .scenario import InfeasibleScenario, Scenario, ScenarioError, compare_variants, run_scenario
from .timing import TfpModel, TimingModel

__version__ = "0.1.0"
