"""FPR, SLR and EX (mean and stddev over repeats) for each schema-linking strategy."""

from _common import parse_args, run

if __name__ == "__main__":
    summary = run(parse_args(__doc__, "toy_linkers.toml"))
    print(f"\n{'strategy':<12}{'FPR':>16}{'SLR':>16}{'EX':>16}")
    for row in summary["linkers"]:
        cells = [f"{row[m + '_mean']:.2f} ± {row[m + '_std']:.2f}" for m in ("fpr", "slr", "ex")]
        print(f"{row['strategy']:<12}" + "".join(f"{c:>16}" for c in cells))
