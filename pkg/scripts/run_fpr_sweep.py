"""IEX against injected FPR for each model, with the fitted sensitivity slope."""

from _common import parse_args, run

if __name__ == "__main__":
    summary = run(parse_args(__doc__, "toy_sweep.toml"))
    for model, entry in summary["models"].items():
        print(f"\n{model}  sensitivity {entry['sensitivity']:.2f}")
        print("  fpr      iex")
        for fpr, acc in entry["points"]:
            print(f"  {fpr:6.4f}  {acc:6.2f}")
