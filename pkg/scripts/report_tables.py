"""Print accuracy, regression and robustness tables from prediction and
error-rate files, rounded to two decimals.

    python scripts/report_tables.py \
        --predictions tests/data/reported_predictions.jsonl \
        --robustness-errors tests/data/reported_robustness_errors.jsonl \
        --age-reference-year 2024
"""
import argparse
from collections import defaultdict

from facadescope import evaluation
from facadescope.evaluation import round_half_up

CLS = ("accuracy", "precision", "recall", "f1", "acc@2")
REG = ("r2", "mae", "mape", "rmse")


def _print(title, header, rows):
    print(f"\n{title}")
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--predictions")
    ap.add_argument("--robustness-errors")
    ap.add_argument("--baseline", default="ResNet50")
    ap.add_argument("--age-reference-year", type=int, default=None)
    ap.add_argument("--average", default="macro", choices=("macro", "weighted"))
    args = ap.parse_args(argv)

    if args.predictions:
        by_model = defaultdict(list)
        for r in evaluation.load_predictions(args.predictions):
            by_model[r.get("model", "model")].append(r)
        cls_rows, reg_rows = [], []
        for model, recs in sorted(by_model.items()):
            metrics = evaluation.evaluate_predictions(recs, args.average, args.age_reference_year)
            for attr, m in metrics.items():
                if attr in evaluation.CLASSIFICATION_ATTRS:
                    cls_rows.append([attr, model, *(f"{round_half_up(m[c]):.2f}" if c in m else "-" for c in CLS)])
                else:
                    reg_rows.append([attr, model, *(f"{round_half_up(m[c]):.2f}" for c in REG)])
        _print("classification", ["attribute", "model", *CLS], sorted(cls_rows))
        _print("regression", ["attribute", "model", *REG], sorted(reg_rows))

    if args.robustness_errors:
        rows = []
        for attr, models in evaluation.load_error_tables(args.robustness_errors).items():
            base = models[args.baseline]
            for model, table in sorted(models.items(), key=lambda kv: (kv[0] != args.baseline, kv[0])):
                rep = evaluation.robustness_report(model, table, base)
                rows.append([attr, model, *(f"{round_half_up(v):.2f}" for k, v in rep.row().items() if k != "model")])
        fams = list(evaluation.ROBUSTNESS_FAMILIES)
        _print("relative CE", ["attribute", "model", *fams, "relative_mce"], rows)


if __name__ == "__main__":
    main()
