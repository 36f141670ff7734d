"""Smoke test for the noisemix_py extension module."""

import json
import math
import tempfile

import noisemix_py as nm


def main():
    m = nm.TransitionMatrix.symmetric(0.4, 4)
    assert abs(m.expected_noise_rate() - 0.3) < 1e-12
    assert all(abs(sum(r) - 1.0) < 1e-12 for r in m.rows())

    labels = [i % 4 for i in range(5000)]
    given, rate = nm.inject_labels(labels, 4, "asymmetric", 0.2, seed=1)
    assert all(g in (t, (t + 1) % 4) for g, t in zip(given, labels))
    assert abs(rate - 0.2) < 0.03, rate

    sampler = nm.MgbsSampler(labels[:200], group_size=4, groups_per_batch=2, seed=3)
    for batch in sampler.epoch(0):
        assert len(batch) == 2
        for group in batch:
            assert len(group) == 4 and len({labels[i] for i in group}) == 1

    total, mean = nm.contrastive_loss([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    assert abs(mean - (math.log(4) - 2)) < 1e-12 and abs(total - 4 * mean) < 1e-12
    assert nm.mixup([[0.0, 2.0], [2.0, 0.0]], [0.5, 0.5]) == [1.0, 1.0]
    assert abs(nm.decision_loss(1.0, 1.0, 1.0, 1.0) - 2.0) < 1e-12
    assert nm.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75

    report = json.loads(nm.classification_report([0, 1, 1, 0], [0, 1, 0, 0], 2))
    assert report["accuracy"] == 75.0

    try:
        nm.inject_labels(labels, 4, "symmetric", 1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("bad rate accepted")

    config = """
[dataset.synthetic]
train_size = 64
test_size = 16

[model]
encoder_kind = "toy_cnn"

[train]
stage1_epochs = 0
stage2_epochs = 1
"""
    with tempfile.TemporaryDirectory() as out:
        run = json.loads(nm.run_experiment(config, out))
        assert run["train_size"] == 64
        assert json.loads(nm.evaluate_run(out)) == run["evaluation"]
    print("python smoke test passed")


if __name__ == "__main__":
    main()
