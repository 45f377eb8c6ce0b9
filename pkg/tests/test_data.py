import http.server
import json
import struct
import threading

import numpy as np
import pytest

from tab2img import data
from tab2img.errors import ConfigError, DataError, FetchError, FormatError


def write_csv(path, text):
    path.write_text(text)
    return str(path)


# ---- load_csv -----------------------------------------------------------

def test_load_csv_basic(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,b,cls\n1,2,x\n3,4,y\n5,6,x\n")
    raw = data.load_csv(p, "cls")
    assert raw.n_rows == 3
    assert raw.column_names == ["a", "b"]
    assert raw.target == ["x", "y", "x"]


def test_load_csv_missing_markers(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,b,cls\n,2,x\n?,4,y\n")
    raw = data.load_csv(p, "cls")
    assert raw.cells[0][0] is None
    assert raw.cells[1][0] is None
    assert raw.cells[0][1] == "2"


def test_load_csv_missing_target_column(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,b\n1,2\n")
    with pytest.raises(FormatError):
        data.load_csv(p, "cls")


def test_load_csv_ragged_row_reports_index(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,b,cls\n1,2,x\n1,2\n")
    with pytest.raises(FormatError, match="row 3"):
        data.load_csv(p, "cls")


def test_balance_scale_shape_and_counts():
    raw = data.balance_scale_table()
    assert raw.n_rows == 625
    assert len(raw.column_names) == 4
    counts = {c: raw.target.count(c) for c in ("L", "B", "R")}
    assert counts == {"L": 288, "B": 49, "R": 288}


# ---- preprocess ----------------------------------------------------------

def test_preprocess_drops_mostly_missing_column(tmp_path):
    rows = "\n".join(f"{'?' if i < 6 else i},1{i},c{i % 2}" for i in range(10))
    p = write_csv(tmp_path / "t.csv", "a,b,cls\n" + rows + "\n")
    ds = data.preprocess(data.load_csv(p, "cls"))
    assert "a" in ds.report.dropped_columns
    assert ds.column_names == ["b"]


def test_preprocess_median_imputation(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,cls\n1,x\n?,y\n3,x\n-1,y\n")
    ds = data.preprocess(data.load_csv(p, "cls"))
    # median of {1, 3, -1} is 1
    assert ds.report.medians["a"] == 1.0
    assert np.allclose(ds.imputed[:, 0], [1.0, 1.0, 3.0, -1.0])


def test_preprocess_median_of_two(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,b,cls\n1,0,x\n?,1,y\n3,2,x\n")
    ds = data.preprocess(data.load_csv(p, "cls"))
    assert np.allclose(ds.imputed[:, 0], [1.0, 2.0, 3.0])


def test_preprocess_drops_constant_column(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,b,cls\n7,1,x\n7,2,y\n7,3,x\n")
    ds = data.preprocess(data.load_csv(p, "cls"))
    assert ds.report.dropped_columns["a"] == "zero variance"


def test_preprocess_categorical_lexicographic_codes(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,b,cls\nred,1,x\nblue,2,y\ngreen,3,x\n")
    ds = data.preprocess(data.load_csv(p, "cls"))
    assert ds.report.categorical_codes["a"] == ["blue", "green", "red"]
    # blue=0, green=1, red=2 before standardization
    assert np.allclose(ds.imputed[:, 0], [2.0, 0.0, 1.0])


def test_preprocess_standardizes_to_unit_stats(tmp_path):
    rng = np.random.default_rng(0)
    lines = [f"{rng.normal():.6f},{rng.normal(5, 3):.6f},c{i % 3}" for i in range(60)]
    p = write_csv(tmp_path / "t.csv", "a,b,cls\n" + "\n".join(lines) + "\n")
    ds = data.preprocess(data.load_csv(p, "cls"))
    assert np.abs(ds.x.mean(axis=0)).max() < 1e-9
    assert np.abs(ds.x.std(axis=0) - 1.0).max() < 1e-9


def test_preprocess_labels_contiguous_and_sorted(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,cls\n1,10\n2,2\n3,10\n4,3\n")
    ds = data.preprocess(data.load_csv(p, "cls"))
    # numeric targets sort numerically: 2 < 3 < 10
    assert ds.report.class_names == ["2", "3", "10"]
    assert np.array_equal(ds.y, [2, 0, 2, 1])


def test_preprocess_single_class_rejected(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,cls\n1,x\n2,x\n")
    with pytest.raises(DataError):
        data.preprocess(data.load_csv(p, "cls"))


def test_preprocess_deterministic_bytes():
    raw = data.balance_scale_table()
    a = data.preprocess(raw)
    b = data.preprocess(raw)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.y.tobytes() == b.y.tobytes()


def test_standardization_roundtrip():
    ds = data.preprocess(data.balance_scale_table())
    recovered = ds.x * ds.report.std + ds.report.mean
    assert np.abs(recovered - ds.imputed).max() < 1e-5


# ---- split ----------------------------------------------------------------

def test_split_balance_scale_500_125():
    ds = data.preprocess(data.balance_scale_table())
    train, test = data.split(ds, 0.8, seed=1)
    assert train.n_rows == 500
    assert test.n_rows == 125


def test_split_deterministic():
    ds = data.preprocess(data.balance_scale_table())
    a, _ = data.split(ds, 0.8, seed=5)
    b, _ = data.split(ds, 0.8, seed=5)
    assert np.array_equal(a.row_indices, b.row_indices)


def test_split_partition_is_exact():
    ds = data.preprocess(data.balance_scale_table())
    train, test = data.split(ds, 0.8, seed=2)
    joined = np.concatenate([train.row_indices, test.row_indices])
    assert np.array_equal(np.sort(joined), ds.row_indices)


def test_split_is_stratified():
    ds = data.preprocess(data.balance_scale_table())
    train, test = data.split(ds, 0.8, seed=3)
    for c in range(3):
        total = (ds.y == c).sum()
        in_train = (train.y == c).sum()
        assert abs(in_train - 0.8 * total) <= 1.0


def test_split_test_uses_train_statistics():
    ds = data.preprocess(data.balance_scale_table())
    train, test = data.split(ds, 0.8, seed=4)
    assert np.array_equal(train.report.mean, test.report.mean)
    assert np.abs(train.x.mean(axis=0)).max() < 1e-9
    recovered = test.x * test.report.std + test.report.mean
    assert np.abs(recovered - test.imputed).max() < 1e-5


def test_split_small_class_falls_back(tmp_path):
    p = write_csv(tmp_path / "t.csv",
                  "a,cls\n" + "\n".join(f"{i},{'y' if i == 0 else 'x'}" for i in range(10)))
    ds = data.preprocess(data.load_csv(str(p), "cls"))
    with pytest.warns(UserWarning, match="non-stratified"):
        train, test = data.split(ds, 0.8, seed=0)
    assert train.n_rows + test.n_rows == 10


def test_split_too_few_rows(tmp_path):
    p = write_csv(tmp_path / "t.csv", "a,cls\n1,x\n2,y\n3,x\n4,y\n")
    ds = data.preprocess(data.load_csv(str(p), "cls"))
    with pytest.raises(DataError):
        data.split(ds, 0.8)


# ---- IDX -------------------------------------------------------------------

@pytest.fixture()
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.random((30, 28, 28)).astype(np.float32)
    labels = rng.integers(0, 10, size=30)
    ip, lp = tmp_path / "imgs", tmp_path / "lbls"
    data.write_idx(ip, lp, images, labels)
    return ip, lp, images, labels


def test_idx_roundtrip(idx_pair):
    ip, lp, images, labels = idx_pair
    got_images, got_labels = data.load_idx(ip, lp)
    assert got_images.shape == (30, 28, 28)
    assert np.array_equal(got_labels, labels)
    assert np.abs(got_images - images).max() <= 0.5 / 255.0


def test_idx_full_byte_scales_to_one(tmp_path):
    images = np.full((1, 28, 28), 255, dtype=np.uint8)
    ip, lp = tmp_path / "i", tmp_path / "l"
    data.write_idx(ip, lp, images, np.zeros(1))
    got, _ = data.load_idx(ip, lp)
    assert got.max() == 1.0 and got.min() == 1.0


def test_idx_rejects_swapped_magic(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    ip, lp = tmp_path / "i", tmp_path / "l"
    data.write_idx(ip, lp, images, np.zeros(2))
    blob = lp.read_bytes()
    lp.write_bytes(struct.pack(">i", data.IDX_IMAGES_MAGIC) + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        data.load_idx(ip, lp)


def test_idx_rejects_count_mismatch(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    data.write_idx(ip, lp, np.zeros((3, 28, 28), dtype=np.uint8), np.zeros(3))
    data.write_idx(tmp_path / "i2", lp, np.zeros((3, 28, 28), dtype=np.uint8), np.zeros(3))
    # truncate the label payload
    blob = lp.read_bytes()
    lp.write_bytes(blob[:-1])
    with pytest.raises(FormatError):
        data.load_idx(ip, lp)


def test_idx_header_fuzz(idx_pair, tmp_path):
    ip, lp, _, _ = idx_pair
    blob = ip.read_bytes()
    rng = np.random.default_rng(99)
    fuzzed = tmp_path / "fuzzed"
    for _ in range(100):
        pos = int(rng.integers(0, 16))
        delta = int(rng.integers(1, 256))
        mutated = bytearray(blob)
        mutated[pos] = (mutated[pos] + delta) % 256
        fuzzed.write_bytes(bytes(mutated))
        with pytest.raises(FormatError):
            data.load_idx(fuzzed, lp)


# ---- pool + mapping ---------------------------------------------------------

@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    return data.ensure_corpora(root, per_class=40)


def test_pool_three_classes(corpora):
    fashion, mnist = corpora
    pool = data.build_pool(3, fashion, mnist)
    assert pool.n_classes == 3
    assert pool.source_names == ["FashionMNIST - T-shirt/Top",
                                 "FashionMNIST - Trouser",
                                 "FashionMNIST - Pullover"]


def test_pool_class_12_is_digit_2(corpora):
    fashion, mnist = corpora
    pool = data.build_pool(13, fashion, mnist)
    assert pool.source_names[12] == "MNIST - 2"
    assert pool.classes[12].shape[0] > 0


def test_pool_rejects_21_classes(corpora):
    fashion, mnist = corpora
    with pytest.raises(ConfigError, match="unsupported"):
        data.build_pool(21, fashion, mnist)


def test_pool_rejects_single_class(corpora):
    fashion, mnist = corpora
    with pytest.raises(ConfigError):
        data.build_pool(1, fashion, mnist)


def test_pool_images_in_unit_range(corpora):
    fashion, mnist = corpora
    pool = data.build_pool(20, fashion, mnist)
    for bucket in pool.classes:
        assert bucket.min() >= 0.0 and bucket.max() <= 1.0
        assert bucket.shape[1:] == (28, 28)


def test_mapping_label_consistency(corpora):
    fashion, mnist = corpora
    ds = data.preprocess(data.balance_scale_table())
    pool = data.build_pool(3, fashion, mnist)
    schema = data.MappingSchema(seed=0, policy="per-epoch")
    for epoch in range(3):
        assignment = data.sample_mapping(ds, pool, schema, epoch)
        assert assignment.shape == (ds.n_rows,)
        # index always addresses the instance's own class bucket
        for c in range(3):
            sizes = pool.classes[c].shape[0]
            assert (assignment[ds.y == c] < sizes).all()


def test_mapping_fixed_policy_is_stable(corpora):
    fashion, mnist = corpora
    ds = data.preprocess(data.balance_scale_table())
    pool = data.build_pool(3, fashion, mnist)
    a = data.sample_mapping(ds, pool, data.MappingSchema(seed=3, policy="fixed"))
    b = data.sample_mapping(ds, pool, data.MappingSchema(seed=3, policy="fixed"))
    assert np.array_equal(a, b)


def test_mapping_per_epoch_resamples(corpora):
    fashion, mnist = corpora
    ds = data.preprocess(data.balance_scale_table())
    pool = data.build_pool(3, fashion, mnist)
    schema = data.MappingSchema(seed=0, policy="per-epoch")
    seen = np.zeros((ds.n_rows, 100), dtype=np.int64)
    for epoch in range(100):
        seen[:, epoch] = data.sample_mapping(ds, pool, schema, epoch)
    distinct = np.array([np.unique(row).size for row in seen])
    # P(one instance stuck on a single image for 100 epochs) < (1/40)^99
    assert (distinct > 1).all()


def test_mapping_single_image_collapses_bucket(corpora):
    fashion, mnist = corpora
    ds = data.preprocess(data.balance_scale_table())
    pool = data.build_pool(3, fashion, mnist)
    schema = data.MappingSchema(seed=1, policy="fixed", single_image=True)
    assignment = data.sample_mapping(ds, pool, schema)
    for c in range(3):
        assert np.unique(assignment[ds.y == c]).size == 1


def test_gather_mapped_images(corpora):
    fashion, mnist = corpora
    ds = data.preprocess(data.balance_scale_table())
    pool = data.build_pool(3, fashion, mnist)
    assignment = data.sample_mapping(ds, pool, data.MappingSchema(seed=0, policy="fixed"))
    images = data.gather_mapped_images(ds.y[:10], assignment[:10], pool)
    assert images.shape == (10, 28, 28)
    assert np.array_equal(images[0], pool.classes[ds.y[0]][assignment[0]])


# ---- fetch -------------------------------------------------------------------

class _OpenMLStub(http.server.BaseHTTPRequestHandler):
    hits = []
    csv_payload = b"a,b,cls\n1,2,x\n3,4,y\n"

    def do_GET(self):
        type(self).hits.append(self.path)
        if self.path.startswith("/api/v1/json/data/"):
            body = json.dumps({"data_set_description": {
                "file_id": "777", "name": "stub"}}).encode()
        elif self.path.startswith("/data/v1/get_csv/777/"):
            body = self.csv_payload
        else:
            self.send_error(404)
            return
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def openml_stub():
    server = http.server.HTTPServer(("127.0.0.1", 0), _OpenMLStub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _OpenMLStub.hits = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_fetch_downloads_and_caches(tmp_path, openml_stub):
    p1 = data.fetch_openml(42, tmp_path, base_url=openml_stub)
    assert open(p1, "rb").read() == _OpenMLStub.csv_payload
    hits_after_first = len(_OpenMLStub.hits)
    p2 = data.fetch_openml(42, tmp_path, base_url=openml_stub)
    assert p1 == p2
    assert len(_OpenMLStub.hits) == hits_after_first  # cache hit: no request
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_fetch_checksum_mismatch_refetches(tmp_path, openml_stub):
    p1 = data.fetch_openml(42, tmp_path, base_url=openml_stub)
    with open(p1, "ab") as fh:
        fh.write(b"corruption")
    p2 = data.fetch_openml(42, tmp_path, base_url=openml_stub)
    assert open(p2, "rb").read() == _OpenMLStub.csv_payload


def test_fetch_offline_without_cache_errors(tmp_path):
    with pytest.raises(FetchError, match="offline|no cached"):
        data.fetch_openml(13, tmp_path, base_url="http://127.0.0.1:1/nope")
