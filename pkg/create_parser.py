import argparse


def create_parser():
    """Initialize and return the argument parser with all commands."""
    parser = argparse.ArgumentParser(description="Spatial Memory Network CLI")

    # Shared arguments live on parent parsers and follow the command name,
    # e.g. `main.py train-base --seed 3`.

    run_parent = argparse.ArgumentParser(add_help=False)
    run_parent.add_argument("--config", type=str, required=False, help="Path to a YAML/JSON run configuration (default: config.yml).")
    run_parent.add_argument("--seed", type=int, required=False, help="Master seed; overrides `seed` in the configuration.")
    run_parent.add_argument("--out", type=str, default="runs", help="Directory for datasets, checkpoints and results (default: runs/).")
    run_parent.add_argument("--profile", type=str, required=False, help="Configuration profile: toy or paper-reference.")
    run_parent.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a configuration field by dotted path, e.g. --set train.steps=200. Repeatable.",
    )
    run_parent.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")

    method_parent = argparse.ArgumentParser(add_help=False)
    method_parent.add_argument(
        "-m",
        "--method",
        type=str,
        choices=["baseline", "mlp", "smn"],
        default="smn",
        help="Which model to use.",
    )

    scene_parent = argparse.ArgumentParser(add_help=False)
    scene_parent.add_argument("-i", "--index", type=int, default=0, help="Index of the test scene.")

    subparsers = parser.add_subparsers(dest="command", help="Commands", required=True)

    subparsers.add_parser("gen-data", help="Generate the synthetic train and test scenes.", parents=[run_parent])
    subparsers.add_parser("train-base", help="Train the base two-stage detector.", parents=[run_parent])

    train_parser = subparsers.add_parser(
        "train-smn", help="Train the memory model (or the MLP context baseline) on top of the base detector.", parents=[run_parent]
    )
    train_parser.add_argument(
        "-m", "--method", type=str, choices=["smn", "mlp"], default="smn", help="Train the spatial memory or the MLP baseline."
    )
    train_parser.add_argument("--init", type=str, required=False, help="Checkpoint of a shorter roll-out to bootstrap from.")

    eval_parser = subparsers.add_parser("eval", help="Evaluate one method under every configured protocol.", parents=[run_parent, method_parent])
    eval_parser.add_argument(
        "-d", "--detections", type=str, required=False, help="Evaluate a JSON-lines detection file instead of a model."
    )

    subparsers.add_parser("compare", help="Evaluate baseline, MLP and SMN side by side.", parents=[run_parent])

    gradcheck_parser = subparsers.add_parser("gradcheck", help="Finite-difference check of every differentiable op.", parents=[run_parent])
    gradcheck_parser.add_argument("--seeds", type=int, default=20, help="Number of random seeds per check.")
    gradcheck_parser.add_argument("--only", type=str, nargs="+", required=False, help="Run only the named checks.")

    subparsers.add_parser("explain", help="Per-iteration base vs fused confidences for one test scene.", parents=[run_parent, scene_parent])
    subparsers.add_parser("dump-memory", help="Save and plot the memory after each write.", parents=[run_parent, scene_parent])
    subparsers.add_parser("report", help="Plot the comparison table and the loss curves.", parents=[run_parent])

    return parser
