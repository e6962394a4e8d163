"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from decimal import Decimal, InvalidOperation
from pathlib import Path

from .llm import BackendError
from .pipeline import (
    DataError,
    RunConfig,
    cmd_distill,
    cmd_evaluate,
    cmd_extract,
    cmd_resolve,
    cmd_select,
    cmd_validate,
)
from .schema import (
    SchemaError,
    builtin_transactional_schema,
    dump_schema,
    load_schema,
    to_output_schema,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _decimal(text: str) -> Decimal:
    try:
        return Decimal(text)
    except InvalidOperation as exc:
        raise argparse.ArgumentTypeError(f"not a decimal: {text!r}") from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--schema", help="schema definition file (default: builtin)")
    parser.add_argument("--tolerance", type=_decimal, default=Decimal("0.005"),
                        help="relative tolerance for constraint checks")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--concurrency", type=int, default=4,
                        help="bounded worker pool size")


def build_parser() -> _Parser:
    parser = _Parser(prog="txdoc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="generate candidates for a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", choices=("http", "replay"), default="replay")
    p.add_argument("--endpoint",
                   help="base URL for http, fixture JSONL path for replay")
    p.add_argument("--model", default="")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--max-tokens", type=int, default=2048)
    p.add_argument("--seed", type=int)
    p.add_argument("--with-images", action="store_true")
    p.set_defaults(func=_run_extract)

    p = sub.add_parser("validate", help="run the validation cascade")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--level", choices=("syntactic", "task", "domain"),
                   default="domain")
    p.set_defaults(func=_run_validate)

    p = sub.add_parser("select", help="pick the best valid candidate per document")
    _add_common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--verdicts", required=True)
    p.set_defaults(func=_run_select)

    p = sub.add_parser("evaluate", help="score candidates against ground truth")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--verdicts", required=True)
    p.set_defaults(func=_run_evaluate)

    p = sub.add_parser("distill", help="export prompt/completion training pairs")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--subset", choices=("domain", "base"), default="domain")
    p.add_argument("--with-images", action="store_true")
    p.set_defaults(func=_run_distill)

    p = sub.add_parser("resolve", help="resolve and check one explicit document")
    _add_common(p)
    p.add_argument("--document", required=True, help="explicit document JSON file")
    p.set_defaults(func=_run_resolve)

    p = sub.add_parser("schema", help="print the schema")
    _add_common(p)
    p.add_argument("--format", choices=("definition", "jsonschema"),
                   default="definition")
    p.set_defaults(func=_run_schema)
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    kwargs = dict(
        out_dir=Path(args.out),
        schema_path=args.schema,
        rel_tol=args.tolerance,
        concurrency=args.concurrency,
    )
    mapping = {
        "backend": "backend",
        "endpoint": "endpoint",
        "model": "model",
        "temperature": "temperature",
        "samples": "n_samples",
        "max_tokens": "max_tokens",
        "seed": "seed",
        "with_images": "with_images",
        "subset": "subset",
    }
    for arg_name, config_name in mapping.items():
        if hasattr(args, arg_name) and getattr(args, arg_name) is not None:
            kwargs[config_name] = getattr(args, arg_name)
    return RunConfig(**kwargs)


def _run_extract(args) -> int:
    path = cmd_extract(args.dataset, _config(args))
    print(f"candidates written to {path}")
    return EXIT_OK


def _run_validate(args) -> int:
    verdicts, survivors = cmd_validate(args.candidates, args.dataset,
                                       _config(args), level=args.level)
    print(f"verdicts written to {verdicts}")
    print(f"{args.level} survivors written to {survivors}")
    return EXIT_OK


def _run_select(args) -> int:
    path = cmd_select(args.candidates, args.verdicts, _config(args))
    print(f"selection written to {path}")
    return EXIT_OK


def _run_evaluate(args) -> int:
    table = cmd_evaluate(args.candidates, args.verdicts, args.dataset, _config(args))
    print(table.to_text(), end="")
    return EXIT_OK


def _run_distill(args) -> int:
    path = cmd_distill(args.candidates, args.verdicts, args.dataset, _config(args))
    print(f"distillation records written to {path}")
    return EXIT_OK


def _run_resolve(args) -> int:
    result = cmd_resolve(args.document, _config(args))
    print(json.dumps(result, indent=2, ensure_ascii=False))
    return EXIT_OK


def _run_schema(args) -> int:
    schema = load_schema(args.schema) if args.schema else builtin_transactional_schema()
    if args.format == "jsonschema":
        print(json.dumps(to_output_schema(schema), indent=2))
    else:
        print(dump_schema(schema), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (DataError, SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
