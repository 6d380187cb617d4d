"""Full pipeline against its ablated variants, as EX and delta to the full pipeline."""

from _common import parse_args, run

if __name__ == "__main__":
    summary = run(parse_args(__doc__, "toy_ablation.toml"))
    print(f"\n{'variant':<22}{'EX':>8}{'delta':>8}")
    for row in summary["ablation"]:
        print(f"{row['variant']:<22}{row['ex']:>8.2f}{row['delta']:>+8.2f}")
