"""Smoke test for the fedsnn_py extension: config round trip, closed forms,
encoder alphabet, partitions, the published energy rows and a tiny run."""

import fedsnn_py as fs

TINY = """
synth_classes = 3
synth_per_class = 8
synth_test_per_class = 4
synth_side = 8
clients = 2
per_class_per_client = 4
rounds = 2
time_steps = 4
"""


def main():
    resolved = fs.resolve_config("")
    assert resolved == fs.default_config()
    assert "lambda = 0.9" in resolved.splitlines()
    assert fs.resolve_config(resolved) == resolved
    for bad in ("lambda = 1.5", "lamda = 0.5"):
        try:
            fs.resolve_config(bad)
        except ValueError as e:
            print(f"rejected {bad!r}: {e}")
        else:
            raise AssertionError(f"{bad!r} accepted")

    assert fs.receptive_field(28, 3, 8, 3, 2) == (0.56, 1.92)

    images, labels = fs.synth(3, 5, side=8, channels=3, seed=2)
    assert len(images) == 15 and sorted(set(labels)) == [0, 1, 2]
    steps = fs.encode(TINY, images[0], seed=7)
    assert len(steps) == 4
    assert {v for s in steps for v in s} <= {-1.0, 0.0, 1.0}

    shards = fs.partition(TINY)
    flat = sorted(i for s in shards for i in s)
    assert len(shards) == 2 and len(flat) == len(set(flat)) == 24

    csv, listing = fs.reference_energy()
    assert csv.startswith("layer,flops,spike_rate,e_cnn_pj,e_snn_pj")
    assert sum(line.endswith("match") for line in listing.splitlines()) == 8

    run = fs.train(TINY)
    again = fs.train(TINY)
    assert run["metrics_csv"] == again["metrics_csv"]
    assert run["checkpoint"] == again["checkpoint"]
    assert len(run["metrics_csv"].splitlines()) == 4
    print(f"tiny run final accuracy {run['final_accuracy']:.3f}")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
