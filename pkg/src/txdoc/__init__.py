"""Validation-first information extraction for transactional documents."""

from .llm import (
    Backend,
    Candidate,
    GenerationRequest,
    HttpBackend,
    PromptSpec,
    ReplayBackend,
    build_prompt,
    select_best,
)
from .metrics import (
    DocTree,
    FilterTable,
    doc_accuracy,
    doc_tree,
    filter_table,
    flatten,
    micro_f1,
    nted,
    ted,
)
from .resolver import (
    ConstraintReport,
    DEFAULT_REL_TOL,
    ResolutionTrace,
    apply_defaults,
    evaluate_constraints,
    resolve,
)
from .schema import (
    Equation,
    FieldDef,
    SchemaDef,
    SchemaError,
    builtin_transactional_schema,
    dump_schema,
    load_schema,
    to_output_schema,
)
from .validation import (
    CascadeLevel,
    CascadeVerdict,
    domain_validate,
    extract_json_block,
    run_cascade,
    syntactic_validate,
    task_validate,
)
from .values import (
    CoercionError,
    ExplicitDocument,
    ImplicitDocument,
    approx_equal,
    materialize,
    parse_amount,
    parse_rate,
)

__version__ = "0.1.0"
