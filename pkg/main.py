import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

# Add the src directory to Python's search path
sys.path.append(str(Path(__file__).parent / "src"))

from create_parser import create_parser
from impl import Datastore, Evaluator, SceneGenerator
from smn_pipeline import SMNPipeline
from util.config import RunConfig, load_run_config, thread_cap
from util.errors import SMNError


def create_pipeline(config: RunConfig, out_dir: str) -> SMNPipeline:
    """Create and return a new SMN pipeline with all components."""
    workers = thread_cap()
    return SMNPipeline(
        config=config,
        out_dir=Path(out_dir),
        generator=SceneGenerator(config.scene),
        datastore=Datastore(),
        evaluator=Evaluator(config.eval, config.num_classes, workers),
        workers=workers,
    )


def run(args) -> None:
    config = load_run_config(args.config, args.overrides, args.seed, args.profile)
    config.ensure_executable()
    pipeline = create_pipeline(config, args.out)

    # Execute commands
    if args.command == "gen-data":
        print(f"🗑️  Regenerating datasets in {args.out} (seed {config.seed})")
        pipeline.gen_data()

    if args.command == "train-base":
        pipeline.train_base()

    if args.command == "train-smn":
        pipeline.train_smn(args.method, Path(args.init) if args.init else None)

    if args.command == "eval":
        pipeline.evaluate(args.method, Path(args.detections) if args.detections else None)

    if args.command == "compare":
        pipeline.compare()

    if args.command == "gradcheck":
        pipeline.gradcheck(args.seeds, args.only)

    if args.command == "explain":
        pipeline.explain(args.index)

    if args.command == "dump-memory":
        pipeline.dump_memory(args.index)

    if args.command == "report":
        pipeline.report()


def main(argv=None) -> int:
    parser = create_parser()  # Create the CLI parser
    args = parser.parse_args(argv)
    load_dotenv()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except SMNError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
