import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image
from torchvision import transforms as T

from mvfusion.appearance import (
    CLIP_MEAN,
    CLIP_STD,
    DEFAULT_CLIP_MODEL,
    ClassTextLibrary,
    ClipEncoder,
    OrthonormalMockEncoder,
    build_text_library,
    default_templates,
    encode_appearance,
    humanize_class_name,
    load_templates,
    precompute_cache,
    preprocess_image,
    select_representative_frame,
    zero_shot_classify,
    zero_shot_scores,
)
from mvfusion.data import (
    ClassSignature,
    InMemoryFrameSource,
    ManifestEntry,
    SplitManifest,
    generate_synthetic_dataset,
    read_feature_cache,
    read_feature_header,
)


class HashEncoder:
    """Unit vectors seeded by the prompt text; images map to a fixed vector."""

    dim = 512
    frozen = True

    def encode_text(self, text):
        rng = np.random.default_rng(sum(text.encode()) * 7919 + len(text))
        return rng.normal(size=512) * 3.0

    def encode_image(self, pixels):
        return np.full(512, 0.5, np.float32)


class ConstantEncoder(HashEncoder):
    def encode_image(self, pixels):
        e = np.zeros(512, np.float32)
        e[0] = 1.0
        return e


def _unit(v):
    v = np.asarray(v, np.float64)
    return v / np.linalg.norm(v)


def _orthonormal(n):
    names = [f"class{i}" for i in range(n)]
    enc = OrthonormalMockEncoder([(i, i, i) for i in range(n)], {c: i for i, c in enumerate(names)})
    return names, enc


def test_single_template_row_is_the_normalized_prompt_embedding():
    enc = HashEncoder()
    lib = build_text_library(["jumping", "running"], ["a video of {}."], enc)
    for row, name in zip(lib.embeddings, ["jumping", "running"]):
        assert_allclose(row, _unit(enc.encode_text(f"a video of {name}.")), atol=1e-6)


def test_duplicate_templates_match_single_template():
    enc = HashEncoder()
    one = build_text_library(["a", "b"], ["x {} y"], enc)
    two = build_text_library(["a", "b"], ["x {} y", "x {} y"], enc)
    assert_allclose(one.embeddings, two.embeddings, atol=1e-6)


def test_ensemble_normalizes_before_and_after_averaging():
    enc = HashEncoder()
    templates = ["a {}", "the {} here", "{} again"]
    lib = build_text_library(["swim"], templates, enc)
    embs = [_unit(enc.encode_text(t.replace("{}", "swim"))) for t in templates]
    assert_allclose(lib.embeddings[0], _unit(np.mean(embs, axis=0)), atol=1e-6)
    assert_allclose(np.linalg.norm(lib.embeddings, axis=1), 1.0, atol=1e-5)


def test_orthonormal_mock_gives_identity_library():
    names, enc = _orthonormal(5)
    lib = build_text_library(names, default_templates(), enc)
    assert_allclose(lib.embeddings[:, :5], np.eye(5), atol=1e-6)
    assert_allclose(lib.embeddings[:, 5:], 0.0)


def test_library_is_permutation_equivariant():
    enc = HashEncoder()
    names = ["a", "b", "c", "d"]
    lib = build_text_library(names, ["{} now", "see {}"], enc)
    perm = [2, 0, 3, 1]
    lib_p = build_text_library([names[i] for i in perm], ["{} now", "see {}"], enc)
    assert_array_equal(lib_p.embeddings, lib.embeddings[perm])


@pytest.mark.parametrize("templates", [["no placeholder"], ["two {} {}"], []])
def test_bad_templates_rejected(templates):
    with pytest.raises(ValueError):
        build_text_library(["a"], templates, HashEncoder())


def test_empty_class_list_rejected():
    with pytest.raises(ValueError):
        build_text_library([], ["{}"], HashEncoder())


def test_default_templates_and_template_file(tmp_path):
    templates = default_templates()
    assert len(templates) == 48
    assert all(t.count("{}") == 1 for t in templates)
    (tmp_path / "t.txt").write_text("a clip of {}.\n\nsomeone doing {}\n", encoding="utf-8")
    assert load_templates(tmp_path / "t.txt") == ["a clip of {}.", "someone doing {}"]


def test_humanize_class_name():
    assert humanize_class_name("ApplyEyeMakeup") == "Apply Eye Makeup"
    assert humanize_class_name("YoYo") == "Yo Yo"
    assert humanize_class_name("action_03") == "action 03"


def test_representative_frame_is_the_middle():
    assert select_representative_frame(10) == 5
    assert select_representative_frame(1) == 0
    assert select_representative_frame(2) == 1
    with pytest.raises(ValueError):
        select_representative_frame(0)


@pytest.mark.parametrize("size", [(240, 320), (320, 240), (224, 224), (100, 150)])
def test_preprocess_matches_torchvision_pipeline(size):
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, (*size, 3), dtype=np.uint8)
    oracle = T.Compose([T.Resize(224, interpolation=T.InterpolationMode.BICUBIC),
                        T.CenterCrop(224), T.ToTensor(), T.Normalize(CLIP_MEAN, CLIP_STD)])
    expected = oracle(Image.fromarray(frame)).numpy()
    out = preprocess_image(frame)
    assert out.shape == (3, 224, 224) and out.dtype == np.float32
    assert_allclose(out, expected, atol=1e-5)


def test_encode_appearance_contracts():
    frame = np.random.default_rng(1).integers(0, 256, (64, 80, 3), dtype=np.uint8)
    a = encode_appearance(frame, HashEncoder())
    b = encode_appearance(frame, HashEncoder())
    assert a.shape == (512,)
    assert a.tobytes() == b.tobytes()
    e1 = encode_appearance(frame, ConstantEncoder())
    assert e1[0] == 1 and np.count_nonzero(e1) == 1


def test_encode_appearance_rejects_wrong_dims():
    class Short(HashEncoder):
        def encode_image(self, pixels):
            return np.ones(10)

    with pytest.raises(ValueError):
        encode_appearance(np.zeros((8, 8, 3), np.uint8), Short())


def test_zero_shot_on_orthonormal_library():
    names, enc = _orthonormal(6)
    lib = build_text_library(names, ["{}"], enc)
    for j in range(6):
        label, scores = zero_shot_classify(lib.embeddings[j], lib)
        assert label == j
        expected = np.zeros(6)
        expected[j] = 1.0
        assert_allclose(scores, expected, atol=1e-6)


def test_zero_shot_tie_and_scale_rules():
    names, enc = _orthonormal(4)
    lib = build_text_library(names, ["{}"], enc)
    orth = np.zeros(512)
    orth[100] = 1.0
    label, scores = zero_shot_classify(orth, lib)
    assert label == 0
    assert_array_equal(scores, np.zeros(4))

    f = np.random.default_rng(3).normal(size=512)
    l1, s1 = zero_shot_classify(f, lib)
    l2, s2 = zero_shot_classify(10 * f, lib)
    assert l1 == l2
    assert_allclose(s1, s2, atol=1e-12)
    scaled = ClassTextLibrary(lib.class_names, lib.templates, lib.embeddings * np.array([[3.0], [1], [0.2], [7]]))
    assert zero_shot_classify(f, scaled)[0] == l1
    with pytest.raises(ValueError):
        zero_shot_classify(np.zeros(512), lib)
    with pytest.raises(ValueError):
        zero_shot_scores(np.ones(10), lib)


def _three_video_setup():
    ds = generate_synthetic_dataset(3, 1, 5, 16, 16, seed=2)
    enc = OrthonormalMockEncoder.for_synthetic(ds.manifest.class_names,
                                               [ClassSignature(i, i) for i in range(3)])
    return ds, enc


def test_precompute_cache_contract(tmp_path):
    ds, enc = _three_video_setup()
    src = InMemoryFrameSource(ds.rgb_frames)
    path = tmp_path / "app.mclf"
    records = precompute_cache(ds.manifest, src, enc, path)
    assert read_feature_header(path) == (512, 3)
    assert [r.video_id for r in read_feature_cache(path)] == [e.video_id for e in ds.manifest]
    first = path.read_bytes()
    precompute_cache(ds.manifest, src, enc, path, workers=2)
    assert path.read_bytes() == first
    # the mock recovers each video's palette colour from its middle frame
    assert [int(np.argmax(r.vector)) for r in records] == [0, 1, 2]


def test_precompute_cache_missing_video_writes_nothing(tmp_path):
    ds, enc = _three_video_setup()
    manifest = SplitManifest("x", ds.manifest.class_names,
                             ds.manifest.entries + [ManifestEntry("ghost", 0, "action_00/ghost")])
    path = tmp_path / "app.mclf"
    with pytest.raises(FileNotFoundError):
        precompute_cache(manifest, InMemoryFrameSource(ds.rgb_frames), enc, path)
    assert not path.exists()
    assert list(tmp_path.iterdir()) == []


class _CharTokenizer:
    def __call__(self, texts, padding=True, return_tensors="pt"):
        from transformers import BatchEncoding

        ids = [[1] + [3 + (ord(c) % 90) for c in t][:60] + [2] for t in texts]
        n = max(map(len, ids))
        input_ids = torch.tensor([x + [0] * (n - len(x)) for x in ids])
        mask = torch.tensor([[1] * len(x) + [0] * (n - len(x)) for x in ids])
        return BatchEncoding({"input_ids": input_ids, "attention_mask": mask})


def test_clip_encoder_plumbing_with_a_small_random_model():
    transformers = pytest.importorskip("transformers")
    cfg = transformers.CLIPConfig(
        text_config=dict(vocab_size=100, hidden_size=32, intermediate_size=64, num_hidden_layers=1,
                         num_attention_heads=4, max_position_embeddings=77, eos_token_id=2),
        vision_config=dict(image_size=224, patch_size=32, hidden_size=32, intermediate_size=64,
                           num_hidden_layers=1, num_attention_heads=4),
        projection_dim=512)
    torch.manual_seed(0)
    enc = ClipEncoder(model=transformers.CLIPModel(cfg), tokenizer=_CharTokenizer())
    frame = np.random.default_rng(0).integers(0, 256, (120, 160, 3), dtype=np.uint8)
    f = encode_appearance(frame, enc)
    assert f.shape == (512,) and np.all(np.isfinite(f))
    assert f.tobytes() == encode_appearance(frame, enc).tobytes()
    t = enc.encode_text("a video of a person juggling.")
    assert t.shape == (512,) and np.all(np.isfinite(t))
    assert not any(p.requires_grad for p in enc.model.parameters())
    lib = build_text_library(["juggling", "rowing"], ["a video of a person {}."], enc)
    assert lib.embeddings.shape == (2, 512)


def test_pretrained_encoder_when_weights_are_available():
    transformers = pytest.importorskip("transformers")
    try:
        model = transformers.CLIPModel.from_pretrained(DEFAULT_CLIP_MODEL, local_files_only=True)
        tok = transformers.CLIPTokenizer.from_pretrained(DEFAULT_CLIP_MODEL, local_files_only=True)
    except Exception:  # noqa: BLE001
        pytest.skip("pretrained image-text weights are not in the local cache")
    enc = ClipEncoder(model=model, tokenizer=tok)
    frame = np.random.default_rng(0).integers(0, 256, (240, 320, 3), dtype=np.uint8)
    f = encode_appearance(frame, enc)
    assert f.shape == (512,) and np.all(np.isfinite(f))
