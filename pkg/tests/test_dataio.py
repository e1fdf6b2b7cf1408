import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memotion.dataio.images import decode_ppm, load_image, normalize_pixels, resize_bilinear, write_ppm
from memotion.dataio.labels import NUM_CLASSES, TASKS, LabelSet, canonical_names, coarsen, parse_label_file
from memotion.dataio.records import MAGIC, encode_payload, iter_records, read_records, write_records
from memotion.dataio.synthetic import (
    NUM_PATTERNS,
    NUM_TEMPLATES,
    generate_synthetic_dataset,
    labels_for,
)
from memotion.dataio.tokenizer import (
    CLS_ID,
    PAD_ID,
    RESERVED,
    SEP_ID,
    UNK,
    Vocabulary,
    build_vocab,
    detokenize,
    tokenize,
)
from memotion.errors import CorruptionError, DecodeError, FormatError, InputError, ParseError

# --- tokenizer ----------------------------------------------------------------------


def vocab_of(*units):
    return Vocabulary(list(RESERVED) + list(units))


def test_empty_string():
    enc = tokenize("", vocab_of("a"), 6)
    assert enc.input_ids.tolist() == [CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert enc.input_mask.tolist() == [1, 1, 0, 0, 0, 0]
    assert not enc.segment_ids.any() and not enc.truncated


def test_greedy_longest_match():
    v = vocab_of("a", "aa")
    assert v.segment("aaa") == ["aa", "a"]
    enc = tokenize("aaa", v, 8)
    assert enc.input_ids[:4].tolist() == [CLS_ID, v.index["aa"], v.index["a"], SEP_ID]


def test_unknown_spans_become_one_unk():
    v = vocab_of("a", "b")
    assert v.segment("axyb") == ["a", UNK, "b"]


def test_truncation_keeps_first_subwords():
    v = vocab_of("a", "b", "c")
    enc = tokenize("a b c a b", v, 5)
    assert enc.truncated
    assert enc.input_ids.tolist() == [CLS_ID, v.index["a"], v.index["b"], v.index["c"], SEP_ID]
    assert enc.input_mask.tolist() == [1] * 5


def test_lowercase_and_nfc():
    v = build_vocab(["café"], 20)
    composed = tokenize("CAFÉ", v, 10).input_ids
    decomposed = tokenize("CAFÉ", v, 10).input_ids
    assert np.array_equal(composed, decomposed)


@settings(max_examples=100, deadline=None)
@given(st.text())
def test_tokenize_is_total_and_well_formed(text):
    v = build_vocab(["the quick brown fox", "jumps over"], 30)
    enc = tokenize(text, v, 12)
    n = int(enc.input_mask.sum())
    assert enc.input_mask.tolist() == [1] * n + [0] * (12 - n)
    assert enc.input_ids[0] == CLS_ID and enc.input_ids[n - 1] == SEP_ID
    assert (enc.input_ids[n:] == PAD_ID).all() and (enc.input_ids < len(v)).all()


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcdefgh", min_size=1, max_size=20))
def test_detokenize_round_trip(word):
    v = build_vocab(["abc def gh", "hgf edcba"], 40)
    assert detokenize(tokenize(word, v, 32).input_ids, v) == word


def test_build_vocab_single_char_words():
    # single-character words have no pairs to merge
    assert build_vocab(["a a a", "a"], 10).tokens == list(RESERVED) + ["a"]


def test_build_vocab_hand_traced_merges():
    # chars: a 3, b 2, c 1; pairs: (a,b) 2, (a,c) 1 -> merge ab, then ac
    assert build_vocab(["ab ab ac"], 10).tokens == list(RESERVED) + ["a", "b", "c", "ab", "ac"]
    # merge ties go to the lexicographically smaller pair
    assert build_vocab(["xy ab"], 7).tokens == list(RESERVED) + ["a", "b", "x", "y", "ab"][:3]
    assert build_vocab(["xy ab"], 9).tokens == list(RESERVED) + ["a", "b", "x", "y", "ab"]


def test_build_vocab_deterministic_and_errors():
    corpus = ["the cat sat on the mat", "a cat and a hat"]
    assert build_vocab(corpus, 40) == build_vocab(corpus, 40)
    with pytest.raises(InputError):
        build_vocab([], 10)
    with pytest.raises(InputError):
        build_vocab(["abc"], 4)


def test_vocab_save_load(tmp_path):
    v = build_vocab(["hello world"], 20)
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v
    with pytest.raises(FormatError):
        Vocabulary(["a", "b"])


# --- images ---------------------------------------------------------------------------


def ppm_bytes(rgb):
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.asarray(rgb, dtype=np.uint8).tobytes()


def test_solid_colour_resize_is_exact(tmp_path):
    rgb = np.zeros((10, 10, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 255, 51, 0
    write_ppm(tmp_path / "s.ppm", rgb)
    img = load_image(tmp_path / "s.ppm", 32, mean=0.0)
    assert img.shape == (3, 32, 32)
    assert (img[0] == 1.0).all() and (img[1] == np.float32(0.2)).all() and (img[2] == 0).all()


def test_checkerboard_bilinear_closed_form():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None]
    out = resize_bilinear(board, 4)[..., 0]
    # half-pixel centres map output 0..3 to source -0.25, 0.25, 0.75, 1.25 (clamped to [0, 1])
    t = np.array([0.0, 0.25, 0.75, 1.0])
    expected = t[:, None] + t[None, :] - 2 * t[:, None] * t[None, :]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_grayscale_is_promoted():
    data = b"P5\n2 1\n255\n" + bytes([0, 255])
    rgb = decode_ppm(data)
    assert rgb.shape == (1, 2, 3) and (rgb[..., 0] == rgb[..., 1]).all() and (rgb[..., 1] == rgb[..., 2]).all()


def test_header_comments_and_16bit():
    data = b"P6\n# comment\n1 1\n65535\n" + struct.pack(">HHH", 65535, 0, 32768)
    np.testing.assert_allclose(decode_ppm(data)[0, 0], [1.0, 0.0, 32768 / 65535])


def test_decode_errors(tmp_path):
    with pytest.raises(FormatError):
        decode_ppm(b"GIF89a....")
    with pytest.raises(DecodeError):
        decode_ppm(b"P6\n4 4\n255\n" + bytes(10), "x.ppm")
    with pytest.raises(DecodeError, match="missing.ppm"):
        load_image(tmp_path / "missing.ppm", 32)


def test_normalize_layout():
    rgb = np.random.default_rng(0).random((4, 5, 3))
    out = normalize_pixels(rgb, 0.5)
    assert out.shape == (3, 4, 5) and out.dtype == np.float32
    np.testing.assert_allclose(out[1], rgb[..., 1] - 0.5, rtol=1e-6)


# --- labels ---------------------------------------------------------------------------

HEADER = "image_name\ttext_corrected\thumour\tsarcasm\toffensive\tmotivational\toverall_sentiment\n"


def test_label_file_round_trip(tmp_path):
    f = tmp_path / "labels.tsv"
    f.write_text(HEADER + "img1.jpg\tLOL cats\tvery_funny\tgeneral\thateful_offensive\tmotivational\tvery_positive\n")
    ((name, text, labels),) = parse_label_file(f)
    assert name == "img1.jpg" and text == "LOL cats"
    assert labels == LabelSet(sentiment=2, humor=2, sarcasm=1, offense=3, motivation=1)


def test_label_file_csv_and_sentiment_collapse(tmp_path):
    f = tmp_path / "labels.csv"
    f.write_text("image_name,text,humour,sarcasm,offensive,motivational,overall_sentiment\n"
                 "a.png,hi,not_funny,not_sarcastic,not_offensive,not_motivational,very_negative\n"
                 "b.png,\"x, y\",hilarious,very_twisted,slight,not_motivational,neutral\n")
    rows = parse_label_file(f)
    assert [r[2].sentiment for r in rows] == [0, 1]
    assert rows[1][1] == "x, y" and rows[1][2].humor == 3


def test_unknown_label_names_row(tmp_path):
    f = tmp_path / "labels.tsv"
    f.write_text(HEADER + "a\tt\tfunny\tgeneral\tslight\tmotivational\tpositive\n"
                          "b\tt\tsuper_funny\tgeneral\tslight\tmotivational\tpositive\n")
    with pytest.raises(ParseError) as info:
        parse_label_file(f)
    assert info.value.row == 3 and "super_funny" in str(info.value)


def test_missing_column(tmp_path):
    f = tmp_path / "labels.tsv"
    f.write_text("image_name\ttext\thumour\n")
    with pytest.raises(FormatError, match="sarcasm"):
        parse_label_file(f)


def test_coarsening_on_all_values():
    for task in TASKS:
        for v in range(NUM_CLASSES[task]):
            if task in ("humor", "sarcasm", "offense"):
                assert coarsen(task, v) == int(v > 0)
            else:
                assert coarsen(task, v) == v
    ls = LabelSet(1, 3, 0, 2, 1)
    assert ls.coarse() == {"humor": 1, "sarcasm": 0, "offense": 1, "motivation": 1}


def test_label_range_checked():
    with pytest.raises(InputError):
        LabelSet(3, 0, 0, 0, 0)


def test_canonical_names():
    names = canonical_names()
    assert names["offense"][3] == "hateful_offensive"
    assert names["sentiment"] == ["negative", "neutral", "positive"]


# --- records --------------------------------------------------------------------------


def same_sample(a, b):
    assert a.id == b.id and a.labels == b.labels
    assert a.image.dtype == b.image.dtype and np.array_equal(a.image, b.image)
    for f in ("input_ids", "input_mask", "segment_ids"):
        assert np.array_equal(getattr(a.text, f), getattr(b.text, f))


def test_record_round_trip_is_bitwise(tmp_path):
    samples = generate_synthetic_dataset(10, seed=2, resolution=32, max_seq_len=16).samples[:3]
    path = tmp_path / "r.mem1"
    assert write_records(path, samples) == 3
    back = read_records(path)
    assert len(back) == 3
    for a, b in zip(samples, back):
        same_sample(a, b)
        assert encode_payload(a) == encode_payload(b)


def test_header_only_file(tmp_path):
    path = tmp_path / "empty.mem1"
    write_records(path, [])
    assert path.read_bytes() == MAGIC + b"\x01\x00"
    assert read_records(path) == []


def test_layout_is_bit_exact(tmp_path):
    s = generate_synthetic_dataset(10, seed=0, resolution=32, max_seq_len=8).samples[0]
    path = tmp_path / "one.mem1"
    write_records(path, [s])
    raw = path.read_bytes()
    (length,) = struct.unpack("<I", raw[6:10])
    payload = raw[10 : 10 + length]
    assert struct.unpack("<I", raw[10 + length :])[0] == zlib.crc32(payload)
    id_len = struct.unpack("<H", payload[:2])[0]
    assert payload[2 : 2 + id_len].decode() == s.id
    h, w, c = struct.unpack("<HHB", payload[2 + id_len : 7 + id_len])
    assert (h, w, c) == (32, 32, 3)
    assert payload[-5:] == bytes(s.labels.as_tuple())
    assert length == 2 + id_len + 5 + 32 * 32 * 3 * 4 + 2 + 8 * 4 + 8 + 8 + 5


def test_flipped_byte_names_record(tmp_path):
    samples = generate_synthetic_dataset(10, seed=2, resolution=32, max_seq_len=16).samples[:3]
    path = tmp_path / "r.mem1"
    write_records(path, samples)
    raw = bytearray(path.read_bytes())
    (len0,) = struct.unpack("<I", raw[6:10])
    second_payload = 6 + 4 + len0 + 4 + 4
    raw[second_payload + 100] ^= 0x01
    path.write_bytes(bytes(raw))
    it = iter_records(path)
    next(it)
    with pytest.raises(CorruptionError) as info:
        next(it)
    assert info.value.index == 1


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "bad.mem1"
    path.write_bytes(b"MEM2\x01\x00")
    with pytest.raises(FormatError):
        read_records(path)
    path.write_bytes(MAGIC + b"\x02\x00")
    with pytest.raises(FormatError):
        read_records(path)


def test_truncated_file(tmp_path):
    samples = generate_synthetic_dataset(10, seed=2, resolution=32, max_seq_len=16).samples[:1]
    path = tmp_path / "r.mem1"
    write_records(path, samples)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CorruptionError):
        read_records(path)


# --- synthetic ------------------------------------------------------------------------


def test_synthetic_is_deterministic():
    a = generate_synthetic_dataset(100, seed=5, resolution=32)
    b = generate_synthetic_dataset(100, seed=5, resolution=32)
    assert a.texts == b.texts
    for x, y in zip(a.samples, b.samples):
        same_sample(x, y)
    c = generate_synthetic_dataset(100, seed=6, resolution=32)
    assert a.texts != c.texts


def test_requested_imbalance_is_exact():
    ds = generate_synthetic_dataset(100, seed=0, resolution=32, pattern_probs=[0.7, 0.1, 0.1, 0.1])
    assert np.bincount(ds.patterns, minlength=NUM_PATTERNS).tolist() == [70, 10, 10, 10]
    humor = [s.labels.humor for s in ds.samples]
    assert np.bincount(humor, minlength=4).tolist() == [70, 10, 10, 10]


def test_labels_follow_pattern_and_template():
    for p in range(NUM_PATTERNS):
        for t in range(NUM_TEMPLATES):
            ls = labels_for(p, t)
            assert ls.humor == p and ls.motivation == t % 2 and ls.sarcasm == t % 4
    with pytest.raises(InputError):
        generate_synthetic_dataset(9, seed=0)


def test_linear_probe_on_text_separates_motivation():
    ds = generate_synthetic_dataset(100, seed=1, resolution=32)
    vocab_n = len(ds.vocab)
    x = np.zeros((100, vocab_n + 1))
    for i, s in enumerate(ds.samples):
        ids = s.text.input_ids[s.text.input_mask == 1]
        np.add.at(x[i], ids, 1.0)
    x[:, -1] = 1.0
    y = np.array([s.labels.motivation for s in ds.samples], dtype=float)
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert ((x @ w > 0.5) == (y == 1)).all()
