"""Walkthrough: score predicted character sets against gold labels.

Shows the per-example precision / recall / F1 / mistake counts and the
macro-averaged dataset view, including the two edge cases that matter in
practice: a frame with no characters at all, and a completely wrong guess.

Run: python3 demos/metrics_walkthrough.py
"""

from vivecap.core_model import DatasetManifest, Frame, GoldLabel, Roster
from vivecap.grounded_metrics import evaluate_dataset

ROSTER = Roster(("Ellie", "Jay", "Phil", "Rex", "Victoria", "Sprite", "Elder_Sprite"))

GOLD = {
    "f1": {"Ellie", "Jay"},
    "f2": {"Victoria"},
    "f3": set(),          # nobody on screen
    "f4": {"Rex", "Sprite"},
}

PREDICTED = {
    "f1": {"Ellie", "Jay"},        # perfect
    "f2": {"Ellie"},               # wrong identity
    "f3": set(),                   # correctly empty: counts as perfect
    "f4": {"Rex", "Sprite", "Phil"},  # one hallucinated extra
}


def main():
    frames = [Frame(id=fid, image_path=f"{fid}.png") for fid in sorted(GOLD)]
    manifest = DatasetManifest(
        frames=frames,
        labels={fid: GoldLabel(frame_id=fid, characters=frozenset(chars))
                for fid, chars in GOLD.items()},
    )
    agg, rows = evaluate_dataset(manifest, PREDICTED, roster=ROSTER)

    print(f"{'frame':<6} {'precision':>9} {'recall':>7} {'f1':>6} {'mistakes':>8}")
    for row in rows:
        m = row.metrics
        print(f"{row.frame_id:<6} {m.precision:>9.2f} {m.recall:>7.2f} "
              f"{m.f1:>6.2f} {m.mistakes:>8d}")
    print("-" * 40)
    print(f"macro F1      {agg.macro_f1:.4f}")
    print(f"mean mistakes {agg.mean_mistakes:.4f}")
    print(f"examples      {agg.n_examples}")


if __name__ == "__main__":
    main()
