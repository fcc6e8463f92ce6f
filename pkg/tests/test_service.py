import json
import threading
import urllib.parse

import numpy as np
import pytest
import requests

from deepseek.embedding import init_model, save_model
from deepseek.features import HashedTextFeaturizer
from deepseek.retrieval import (
    MODE_CAPTION,
    SourceRecord,
    build_index,
    load_index,
    query_text,
    save_index,
)
from deepseek.service import SearchServer, ServiceConfig, load_snapshot

CAPTIONS = {
    "park": ["a dog in the park", "dog running on grass"],
    "sea": ["boat on the sea", "waves under a boat"],
    "city at night": ["city skyline at night", "lights of a city"],
}


def build_fixture(tmp_path, n_extra=0, text_dim=16):
    model = init_model(4, text_dim, 4, seed=3)
    featurizer = HashedTextFeaturizer(dim=text_dim)
    sources = [
        SourceRecord(image_id=image_id, captions=caps,
                     uri=f"http://assets/{urllib.parse.quote(image_id)}.jpg")
        for image_id, caps in CAPTIONS.items()
    ]
    for i in range(n_extra):
        sources.append(SourceRecord(image_id=f"extra-{i}", captions=[f"extra thing {i}"]))
    index = build_index(MODE_CAPTION, sources, model, featurizer)
    index_path = tmp_path / "fixture.dski"
    model_path = tmp_path / "fixture.dskm"
    save_index(index, index_path)
    save_model(model, model_path)
    return index_path, model_path


@pytest.fixture
def server(tmp_path):
    index_path, model_path = build_fixture(tmp_path)
    config = ServiceConfig(
        index_path=str(index_path), model_path=str(model_path),
        host="127.0.0.1", port=0, default_k=5, max_k=50,
    )
    srv = SearchServer(config)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    host, port = srv.server_address[:2]
    base = f"http://{host}:{port}"
    try:
        yield base, srv, tmp_path
    finally:
        srv.shutdown()
        srv.server_close()


class TestHealth:
    def test_reports_stats_and_k_limits(self, server):
        base, _, _ = server
        body = requests.get(f"{base}/api/health").json()
        assert body["status"] == "ok"
        assert body["index_size"] == 3
        assert body["mode"] == "caption_based"
        assert body["default_k"] == 5
        assert body["max_k"] == 50

    def test_stable_across_calls(self, server):
        base, _, _ = server
        assert (
            requests.get(f"{base}/api/health").json()
            == requests.get(f"{base}/api/health").json()
        )


class TestSearch:
    def test_exact_caption_query_is_rank_one_distance_zero(self, server):
        base, _, _ = server
        body = requests.get(
            f"{base}/api/search", params={"q": "a dog in the park", "k": 3}
        ).json()
        assert body["results"][0]["image_id"] == "park"
        assert body["results"][0]["distance"] == 0.0
        assert body["results"][0]["best_caption"] == "a dog in the park"
        assert body["results"][0]["uri"].startswith("http://assets/")

    def test_matches_in_process_query_text(self, server):
        base, srv, _ = server
        snapshot = srv.service.snapshot
        for q in ("dog", "boat on the sea", "city lights", "waves"):
            response = requests.get(f"{base}/api/search", params={"q": q, "k": 3}).json()
            expected = query_text(snapshot.index, snapshot.model, snapshot.featurizer, q, 3)
            assert [r["image_id"] for r in response["results"]] == [
                h.image_id for h in expected.ranked
            ]
            assert [r["distance"] for r in response["results"]] == [
                h.distance for h in expected.ranked
            ]

    def test_results_canonical_json_byte_compares_to_library(self, server):
        base, srv, _ = server
        snapshot = srv.service.snapshot
        for q in ("dog in the park", "city lights at night"):
            body = requests.get(f"{base}/api/search", params={"q": q, "k": 3}).json()
            expected = query_text(snapshot.index, snapshot.model, snapshot.featurizer, q, 3)
            want = []
            for hit in expected.ranked:
                entry = {"image_id": hit.image_id, "distance": hit.distance}
                if hit.best_caption is not None:
                    entry["best_caption"] = hit.best_caption
                record = snapshot.index.record(hit.image_id)
                if record is not None and record.uri is not None:
                    entry["uri"] = record.uri
                want.append(entry)
            canonical_got = json.dumps(body["results"], sort_keys=True)
            canonical_want = json.dumps(want, sort_keys=True)
            assert canonical_got == canonical_want

    def test_missing_q_is_empty_query_400(self, server):
        base, _, _ = server
        response = requests.get(f"{base}/api/search")
        assert response.status_code == 400
        assert response.json()["error"] == "empty_query"

    def test_blank_q_is_empty_query_400(self, server):
        base, _, _ = server
        response = requests.get(f"{base}/api/search", params={"q": "   "})
        assert response.status_code == 400
        assert response.json()["error"] == "empty_query"

    @pytest.mark.parametrize("bad_k", ["0", "-3", "51", "abc"])
    def test_bad_k_is_400(self, server, bad_k):
        base, _, _ = server
        response = requests.get(f"{base}/api/search", params={"q": "dog", "k": bad_k})
        assert response.status_code == 400
        assert response.json()["error"] == "bad_k"

    def test_default_k_applies(self, server):
        base, _, _ = server
        body = requests.get(f"{base}/api/search", params={"q": "dog"}).json()
        assert len(body["results"]) == 3  # whole index is smaller than default_k

    def test_response_shape(self, server):
        base, _, _ = server
        body = requests.get(f"{base}/api/search", params={"q": "dog", "k": 2}).json()
        assert set(body) == {"query", "mode", "results", "took_ms"}
        assert body["query"] == "dog"
        dists = [r["distance"] for r in body["results"]]
        assert dists == sorted(dists)


class TestImages:
    def test_known_id(self, server):
        base, _, _ = server
        body = requests.get(f"{base}/api/images/park").json()
        assert body["image_id"] == "park"
        assert body["captions"] == CAPTIONS["park"]

    def test_unknown_id_404(self, server):
        base, _, _ = server
        response = requests.get(f"{base}/api/images/never-indexed")
        assert response.status_code == 404
        assert response.json()["error"] == "not_found"

    def test_url_escaped_id_round_trips(self, server):
        base, _, _ = server
        quoted = urllib.parse.quote("city at night")
        body = requests.get(f"{base}/api/images/{quoted}").json()
        assert body["image_id"] == "city at night"


class TestReload:
    def test_reload_same_files_is_idempotent(self, server):
        base, _, _ = server
        body = requests.post(f"{base}/api/admin/reload").json()
        assert body == {"reloaded": True, "index_size": 3}

    def test_reload_picks_up_larger_index(self, server):
        base, _, tmp_path = server
        build_fixture(tmp_path, n_extra=2)  # overwrites fixture files
        body = requests.post(f"{base}/api/admin/reload").json()
        assert body["index_size"] == 5
        assert requests.get(f"{base}/api/health").json()["index_size"] == 5

    def test_reload_corrupt_index_is_409_and_service_keeps_old_snapshot(self, server):
        base, _, tmp_path = server
        (tmp_path / "fixture.dski").write_bytes(b"garbage")
        response = requests.post(f"{base}/api/admin/reload")
        assert response.status_code == 409
        assert response.json()["error"] == "reload_failed"
        # old snapshot still serves
        body = requests.get(f"{base}/api/search", params={"q": "dog"}).json()
        assert len(body["results"]) == 3

    def test_unknown_route_404(self, server):
        base, _, _ = server
        assert requests.get(f"{base}/api/nope").status_code == 404
        assert requests.post(f"{base}/api/nope").status_code == 404


class TestConfig:
    def test_env_overrides(self, tmp_path):
        index_path, model_path = build_fixture(tmp_path)
        env = {
            "DEEPSEEK_ADDR": "0.0.0.0:9100",
            "DEEPSEEK_INDEX": str(index_path),
            "DEEPSEEK_MODEL": str(model_path),
        }
        config = ServiceConfig.load(env=env)
        assert config.host == "0.0.0.0"
        assert config.port == 9100
        assert config.index_path == str(index_path)

    def test_file_plus_env(self, tmp_path):
        index_path, model_path = build_fixture(tmp_path)
        config_file = tmp_path / "svc.json"
        config_file.write_text(json.dumps({
            "index_path": str(index_path),
            "model_path": str(model_path),
            "default_k": 7,
        }))
        config = ServiceConfig.load(config_path=config_file, env={"DEEPSEEK_ADDR": ":9200"})
        assert config.default_k == 7
        assert config.port == 9200
        snapshot = load_snapshot(config)
        assert len(snapshot.index) == 3

    def test_missing_paths_rejected(self):
        with pytest.raises(Exception):
            ServiceConfig.load(env={})
