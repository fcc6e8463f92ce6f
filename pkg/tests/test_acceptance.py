"""Acceptance suite: every release-gating check with its stated tolerance.

Each test prints a PASS/FAIL line via the conftest terminal summary. The
quantitative fixtures are constructed so a perfect solution exists by
design; the oracles (finite differences, brute-force ranking, brute-force
AP) are implemented independently of the code paths they check.
"""

import logging
import math
import threading
import time

import numpy as np
import pytest
import requests

from deepseek.captioner import (
    EOS,
    CaptionTrainConfig,
    LstmParams,
    Vocabulary,
    caption_nll,
    greedy_decode,
    init_captioner,
    load_captioner,
    save_captioner,
    train_captioner,
)
from deepseek.embedding import (
    JointEmbeddingModel,
    PairBatch,
    ProjectionLayer,
    TrainConfig,
    init_model,
    load_model,
    loss_gradients,
    save_model,
    train,
)
from deepseek.evaluation import average_precision, mean_average_precision
from deepseek.features import (
    HashedTextFeaturizer,
    read_feature_file,
    write_feature_file,
)
from deepseek.numerics import Rng
from deepseek.retrieval import (
    MODE_CAPTION,
    MODE_EMBEDDING,
    SourceRecord,
    build_index,
    load_index,
    query_text,
    save_index,
    search,
)
from deepseek.service import SearchServer, ServiceConfig

from oracles import hybrid_max_rel_err, mp_caption_nll, mp_pair_loss


def brute_force_ap(ranked, relevant):
    total = 0.0
    for k in range(1, len(ranked) + 1):
        rel_k = 1 if ranked[k - 1] in relevant else 0
        p_k = len([x for x in ranked[:k] if x in relevant]) / k
        total += p_k * rel_k
    return total / len(relevant)


def test_gradient_fidelity():
    """Analytic pair-loss and BPTT gradients vs central differences,
    max rel error < 1e-6 over >= 20 seeds each, under 30 s."""
    started = time.monotonic()
    worst = 0.0

    for seed in range(20):
        rng = np.random.default_rng(seed)
        image_dim = int(rng.integers(3, 7))
        text_dim = int(rng.integers(3, 9))
        d = int(rng.integers(2, 5))
        n = int(rng.integers(2, 7))
        batch = PairBatch(rng.normal(size=(n, image_dim)),
                          rng.normal(size=(n, text_dim)))
        model = init_model(image_dim, text_dim, d, seed=seed + 100)
        _, grads = loss_gradients(model, batch)

        def f(bundle):
            loss, _ = loss_gradients(JointEmbeddingModel.from_params(bundle), batch)
            return loss

        err = hybrid_max_rel_err(
            f,
            lambda b, ov: mp_pair_loss(b, batch.image_features, batch.text_features, ov),
            grads, model.params(),
        )
        worst = max(worst, err)

    words = ["red", "dog", "park", "boat", "sea", "night"]
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        image_dim = int(rng.integers(3, 7))
        e = int(rng.integers(2, 5))
        h = int(rng.integers(3, 6))
        caption = " ".join(rng.choice(words, size=int(rng.integers(1, 5))))
        vocab = Vocabulary.build([" ".join(words)], min_freq=1)
        params = init_captioner(len(vocab), image_dim, e=e, h=h, seed=seed)
        # the zero-initialized head has structurally flat gradients; nudge it
        params.w_out = rng.normal(size=params.w_out.shape) * 0.4
        params.b_out = rng.normal(size=params.b_out.shape) * 0.1
        feat = rng.normal(size=image_dim)
        _, grads = caption_nll(params, vocab, feat, caption)
        ids = vocab.encode_text(caption)
        targets = ids + [EOS]

        def f(bundle):
            nll, _ = caption_nll(LstmParams.from_dict(bundle), vocab, feat, caption)
            return nll

        err = hybrid_max_rel_err(
            f, lambda b, ov: mp_caption_nll(b, ids, targets, feat, ov),
            grads, params.to_dict(),
        )
        worst = max(worst, err)

    elapsed = time.monotonic() - started
    assert worst < 1e-6, f"worst gradient relative error {worst:.3e}"
    assert elapsed < 30.0, f"gradient fidelity took {elapsed:.1f}s"


def test_ap_map_oracle():
    """average_precision reproduces hand values exactly and matches an
    independent brute-force AP on 1000 random instances, diff < 1e-12,
    under 10 s."""
    started = time.monotonic()

    # hand evaluation of the AP formula: (P(1) + P(3)) / R = (1 + 2/3) / 2
    fixture_ap = average_precision(["r1", "n1", "r2", "n2"], {"r1", "r2"})
    assert fixture_ap == (1 + 2 / 3) / 2
    assert fixture_ap == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision(["a", "b"], {"a", "b"}) == 1.0
    assert average_precision(["x", "y"], {"z"}) == 0.0
    assert average_precision(["n", "r"], {"r"}) == 0.5

    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n_items = int(rng.integers(1, 40))
        items = [f"d{i}" for i in range(n_items)]
        depth = int(rng.integers(1, n_items + 1))
        ranked = list(rng.permutation(items))[:depth]
        n_rel = int(rng.integers(1, n_items + 1))
        relevant = set(rng.choice(items, size=n_rel, replace=False).tolist())
        got = average_precision(ranked, relevant)
        want = brute_force_ap(ranked, relevant)
        assert abs(got - want) < 1e-12

    report = mean_average_precision(
        {"q1": ["r1"], "q2": ["n", "r2"]}, {"q1": {"r1"}, "q2": {"r2"}}
    )
    assert report.map == pytest.approx(0.75, abs=1e-15)

    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"AP oracle took {elapsed:.1f}s"


def test_retrieval_exactness():
    """search equals the brute-force oracle, including tie order, on 100
    random indexes (N <= 500, d <= 32) for k in {1, 5, N}, under 30 s."""
    started = time.monotonic()
    rng = np.random.default_rng(7)

    for trial in range(100):
        n = int(rng.integers(1, 501))
        d = int(rng.integers(1, 33))
        vectors = rng.normal(size=(n, d))
        if trial % 10 == 0 and n >= 4:
            vectors[1] = vectors[0]  # force exact distance ties
            vectors[3] = vectors[2]
        ids = [f"img-{i:04d}" for i in rng.permutation(n)]
        model = JointEmbeddingModel(
            image_proj=ProjectionLayer(np.eye(d), np.zeros(d)),
            text_proj=ProjectionLayer(np.eye(d), np.zeros(d)),
        )
        sources = [
            SourceRecord(image_id=ids[i], image_feature=vectors[i]) for i in range(n)
        ]
        index = build_index(MODE_EMBEDDING, sources, model)
        query = rng.normal(size=d)

        oracle = sorted(
            (float(np.sum((vectors[i] - query) ** 2)), ids[i]) for i in range(n)
        )
        for k in {1, 5, n}:
            if k < 1:
                continue
            result = search(index, query, k)
            expect = oracle[: min(k, n)]
            assert [h.image_id for h in result.ranked] == [i for _, i in expect]
            for hit, (dist, _) in zip(result.ranked, expect):
                assert abs(hit.distance - dist) < 1e-9  # metric contract

    elapsed = time.monotonic() - started
    assert elapsed < 30.0, f"retrieval exactness took {elapsed:.1f}s"


def make_alignment_fixture():
    """500 pairs, 16-dim both sides, u = A v + noise(sigma=0.01) with A a
    fixed random scaled rotation, so an exact text-side solution exists."""
    dim, n = 16, 500
    rng = Rng(424242)
    vs = rng.normal(size=(n, dim))
    a_mat = 2.0 * np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    us = vs @ a_mat.T + rng.normal(sigma=0.01, size=(n, dim))
    model = JointEmbeddingModel(
        image_proj=ProjectionLayer(np.eye(dim), np.zeros(dim)),
        text_proj=init_model(dim, dim, dim, seed=99).text_proj,
    )
    return model, PairBatch(vs, us)


def test_synthetic_alignment_recovery():
    """Frozen-identity image side, stock lr 1e-3 and batch 128,
    <= 200 epochs: top-1 >= 95% and mAP >= 0.97, under 60 s."""
    started = time.monotonic()
    model, batch = make_alignment_fixture()
    config = TrainConfig(
        epochs=200, d=16, learning_rate=1e-3, batch_size=128,
        seed=7, freeze_image_side=True,
    )
    result = train(model, batch, config)
    assert result.loss_history[-1] < 0.05

    trained = result.model
    n = len(batch)
    ids = [f"img{i}" for i in range(n)]
    sources = [
        SourceRecord(image_id=ids[i], image_feature=batch.image_features[i])
        for i in range(n)
    ]
    index = build_index(MODE_EMBEDDING, sources, trained)

    hits = 0
    run = {}
    for i in range(n):
        ranked = search(index, trained.embed_text(batch.text_features[i]), 10).ranked
        run[f"q{i}"] = [h.image_id for h in ranked]
        if ranked[0].image_id == ids[i]:
            hits += 1
    top1 = hits / n
    qrels = {f"q{i}": {ids[i]} for i in range(n)}
    report = mean_average_precision(run, qrels)

    elapsed = time.monotonic() - started
    assert top1 >= 0.95, f"top-1 accuracy {top1:.3f}"
    assert report.map >= 0.97, f"mAP {report.map:.3f}"
    assert elapsed < 60.0, f"alignment recovery took {elapsed:.1f}s"


def test_collapse_diagnostic(caplog):
    """Unconstrained training on mismatched random pairs reaches loss
    < 1e-3 with embedding variance < 1e-2, and the trainer warns."""
    rng = np.random.default_rng(13)
    batch = PairBatch(rng.normal(size=(24, 6)), rng.normal(size=(24, 6)))
    model = init_model(6, 6, 4, seed=14)
    config = TrainConfig(epochs=3000, d=4, batch_size=24)
    with caplog.at_level(logging.WARNING, logger="deepseek.embedding"):
        result = train(model, batch, config)
    assert result.diagnostics["final_loss"] < 1e-3
    assert result.diagnostics["embedding_variance"] < 1e-2
    assert result.diagnostics["collapse"] is True
    assert any("collapse" in record.message for record in caplog.records)


def make_two_class_fixture():
    image_dim = 8
    rng = Rng(515151)
    center_a = rng.uniform(-1, 1, size=(image_dim,))
    center_b = rng.uniform(-1, 1, size=(image_dim,))
    train_set, test_set = [], []
    for i in range(50):
        sample_a = (center_a + rng.normal(sigma=0.05, size=(image_dim,)), "red square")
        sample_b = (center_b + rng.normal(sigma=0.05, size=(image_dim,)), "blue circle")
        if i < 40:
            train_set += [sample_a, sample_b]
        else:
            test_set += [sample_a, sample_b]
    return train_set, test_set


def test_toy_captioner():
    """Two-class fixture: held-out greedy decode >= 90% and epoch-1
    training NLL strictly below ln|V|, under 60 s."""
    started = time.monotonic()
    train_set, test_set = make_two_class_fixture()
    vocab = Vocabulary.build([caption for _, caption in train_set], min_freq=1)
    params = init_captioner(len(vocab), 8, e=8, h=16, seed=5)
    config = CaptionTrainConfig(epochs=30, learning_rate=3e-3, batch_size=16, seed=9)
    result = train_captioner(params, vocab, train_set, config)

    assert result.loss_history[0] < math.log(len(vocab))

    correct = sum(
        1 for feat, caption in test_set
        if greedy_decode(result.params, vocab, feat) == caption
    )
    accuracy = correct / len(test_set)
    elapsed = time.monotonic() - started
    assert accuracy >= 0.9, f"held-out decode accuracy {accuracy:.2f}"
    assert elapsed < 60.0, f"toy captioner took {elapsed:.1f}s"


def test_persistence_round_trips(tmp_path):
    """DSKF/DSKM/DSKC/DSKI round-trips are bit-exact; search results are
    identical before save and after load for 20 random queries."""
    rng = np.random.default_rng(99)

    # DSKF
    feat_records = [(f"id{i}", rng.normal(size=5)) for i in range(6)]
    f1, f2 = tmp_path / "a.dskf", tmp_path / "b.dskf"
    write_feature_file(f1, feat_records)
    write_feature_file(f2, read_feature_file(f1))
    assert f1.read_bytes() == f2.read_bytes()

    # DSKM
    model = init_model(5, 16, 6, seed=3)
    m1, m2 = tmp_path / "a.dskm", tmp_path / "b.dskm"
    save_model(model, m1)
    save_model(load_model(m1), m2)
    assert m1.read_bytes() == m2.read_bytes()

    # DSKC
    vocab = Vocabulary.build(["red square", "blue circle"], min_freq=1)
    params = init_captioner(len(vocab), 5, e=4, h=6, seed=8)
    c1, c2 = tmp_path / "a.dskc", tmp_path / "b.dskc"
    save_captioner(params, vocab, c1)
    save_captioner(*load_captioner(c1), c2)
    assert c1.read_bytes() == c2.read_bytes()

    # DSKI, both modes, plus post-reload search identity
    featurizer = HashedTextFeaturizer(dim=16)
    sources = [
        SourceRecord(
            image_id=f"img{i}",
            image_feature=rng.normal(size=5),
            captions=[f"thing {i}", f"object {i}"],
            uri=f"http://assets/{i}.jpg" if i % 2 else None,
        )
        for i in range(5)
    ]
    for mode in (MODE_EMBEDDING, MODE_CAPTION):
        index = build_index(mode, sources, model,
                            featurizer if mode == MODE_CAPTION else None)
        i1 = tmp_path / f"{mode}-a.dski"
        i2 = tmp_path / f"{mode}-b.dski"
        save_index(index, i1)
        loaded = load_index(i1)
        save_index(loaded, i2)
        assert i1.read_bytes() == i2.read_bytes()
        for _ in range(20):
            query = rng.normal(size=index.d)
            assert search(index, query, 3) == search(loaded, query, 3)


FIXTURE_CAPTIONS = {
    "park": ["a dog in the park", "dog running on grass"],
    "sea": ["boat on the sea", "waves under a boat"],
    "night": ["city skyline at night", "lights of a city"],
    "studio": ["red square painting", "abstract shapes on canvas"],
}


def test_service_conformance(tmp_path):
    """/api/search equals in-process query_text for 20 queries on a fixture
    index; error codes and statuses are as documented."""
    model = init_model(4, 24, 6, seed=17)
    featurizer = HashedTextFeaturizer(dim=24)
    sources = [
        SourceRecord(image_id=image_id, captions=captions)
        for image_id, captions in FIXTURE_CAPTIONS.items()
    ]
    index = build_index(MODE_CAPTION, sources, model, featurizer)
    index_path = tmp_path / "svc.dski"
    model_path = tmp_path / "svc.dskm"
    save_index(index, index_path)
    save_model(model, model_path)

    config = ServiceConfig(index_path=str(index_path), model_path=str(model_path),
                           host="127.0.0.1", port=0, default_k=4, max_k=10)
    server = SearchServer(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    base = f"http://{host}:{port}"

    try:
        snapshot = server.service.snapshot
        rng = np.random.default_rng(23)
        vocab_words = ["dog", "park", "boat", "sea", "city", "night", "red",
                       "square", "grass", "waves", "lights", "canvas"]
        queries = [
            " ".join(rng.choice(vocab_words, size=int(rng.integers(1, 5))))
            for _ in range(20)
        ]
        for q in queries:
            body = requests.get(f"{base}/api/search", params={"q": q, "k": 4}).json()
            expected = query_text(snapshot.index, snapshot.model,
                                  snapshot.featurizer, q, 4)
            got = [(r["image_id"], r["distance"], r.get("best_caption")) for r in body["results"]]
            want = [(h.image_id, h.distance, h.best_caption) for h in expected.ranked]
            assert got == want
            assert body["query"] == q
            assert body["mode"] == "caption_based"

        health = requests.get(f"{base}/api/health").json()
        assert health["status"] == "ok"
        assert health["index_size"] == len(FIXTURE_CAPTIONS)

        response = requests.get(f"{base}/api/search")
        assert response.status_code == 400 and response.json()["error"] == "empty_query"
        response = requests.get(f"{base}/api/search", params={"q": " "})
        assert response.status_code == 400 and response.json()["error"] == "empty_query"
        for bad_k in ("0", "11", "x"):
            response = requests.get(f"{base}/api/search", params={"q": "dog", "k": bad_k})
            assert response.status_code == 400 and response.json()["error"] == "bad_k"
        response = requests.get(f"{base}/api/images/park")
        assert response.status_code == 200
        assert response.json()["captions"] == FIXTURE_CAPTIONS["park"]
        response = requests.get(f"{base}/api/images/ghost")
        assert response.status_code == 404 and response.json()["error"] == "not_found"

        index_path.write_bytes(b"corrupted")
        response = requests.post(f"{base}/api/admin/reload")
        assert response.status_code == 409 and response.json()["error"] == "reload_failed"
        body = requests.get(f"{base}/api/search", params={"q": "dog"}).json()
        assert len(body["results"]) == 4  # old snapshot still serving
    finally:
        server.shutdown()
        server.server_close()
