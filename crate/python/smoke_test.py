"""Smoke test for the collabvd_py extension.

Build and run:

    cargo build -p collabvd-py --features extension-module
    cp target/debug/libcollabvd_py.so /tmp/collabvd_py.so
    PYTHONPATH=/tmp python3 python/smoke_test.py
"""

import json
import os
import sys
import tempfile

import collabvd_py as cv

N = 30


def vulnerable(i):
    return (i * 7) % 10 < 4


def main():
    assert cv.parse_reply("Yes, the copy overflows buf.") == {
        "verdict": "vulnerable",
        "description": "the copy overflows buf.",
    }
    assert cv.parse_reply("No.")["verdict"] == "clean"
    assert cv.f1_score(0.0, 0.0) is None
    assert abs(cv.f1_score(0.5, 1.0) - 2 / 3) < 1e-12
    m = cv.metrics(3, 1, 5, 1)
    assert m["accuracy"] == 0.8 and m["counts"]["tp"] == 3
    text = cv.enrich_text("int f();", "clean")
    assert text.startswith("int f();\n") and "NO" in text.splitlines()[-1]

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data.jsonl")
        det = os.path.join(tmp, "det.jsonl")
        chat = os.path.join(tmp, "chat.jsonl")
        with open(data, "w") as d, open(det, "w") as s, open(chat, "w") as c:
            for i in range(N):
                v = vulnerable(i)
                d.write(json.dumps({"idx": i, "func": f"int f{i}(void);", "target": int(v)}) + "\n")
                z = v if i % 4 else not v
                s.write(json.dumps({"idx": i, "verdict": "vulnerable" if z else "clean",
                                    "score": 0.9 if z else 0.1}) + "\n")
                first = f"Yes, f{i} overflows." if i % 3 else "No."
                second = f"Yes, f{i} overflows on recheck." if v else "No, it is bounded."
                c.write(json.dumps({"idx": i, "replies": [first, second]}) + "\n")

        corpus = cv.Corpus.load(data)
        assert len(corpus) == N
        split = cv.split_stratified(corpus, (0.6, 0.2, 0.2), 42)
        assert sorted(split.ids("train") + split.ids("valid") + split.ids("test")) == list(range(N))
        manifest = os.path.join(tmp, "split.json")
        split.save(manifest)
        assert cv.Split.load(manifest, corpus).manifest_json() == split.manifest_json()

        cfg = cv.RunConfig()
        cfg.detector = "script:" + det
        cfg.llm = "script:" + chat
        cfg.hint_mode = "detector"
        cfg.concurrency = 2
        again = cv.RunConfig(cfg.to_toml())
        assert again.digest() == cfg.digest()

        store_path = os.path.join(tmp, "store.jsonl")
        report = cv.assess(cfg, corpus, split, store_path)
        assert report["run"]["completed"] == N, report["run"]
        assert not report["run"]["failed"]
        warm = cv.assess(cfg, corpus, split, store_path)
        assert warm["run"]["cached"] == N

        store = cv.AssessmentStore.load(store_path)
        assert len(store) == N and store.coverage_gaps(split) == []
        rec = store.get(5)
        assert rec["complete"] and rec["hint_mode"] == "detector"
        assert store.get(10_000) is None

        summary = cv.export_training_set(cfg, split, store, os.path.join(tmp, "enriched"))
        assert sum(f["records"] for f in summary["files"]) == N

        finals = {i: store.get(i)["final"]["verdict"] for i in range(N)}
        preds = {i: ("vulnerable" if v == "vulnerable" else "clean") for i, v in finals.items()}
        truths = corpus.truths()
        assert cv.evaluate(truths, truths)["accuracy"] == 1.0
        print("llm final accuracy", round(cv.evaluate(preds, truths)["accuracy"], 4))
        venn = cv.compare_models([("llm", preds), ("oracle", truths)], truths)
        assert venn["union_correct"] == sum(vulnerable(i) for i in range(N))

        try:
            cv.Corpus.load(os.path.join(tmp, "absent.jsonl"))
        except FileNotFoundError:
            pass
        else:
            raise AssertionError("missing dataset should raise FileNotFoundError")
        try:
            cv.compare_models([("only", preds)], truths)
        except cv.CollabvdError:
            pass
        else:
            raise AssertionError("a single model should be refused")

    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
