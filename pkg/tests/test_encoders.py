import numpy as np
import pytest
import torch

from palm.config import EncoderConfig, preset
from palm.encoders import (
    ACTION_QUERY,
    AFFORDANCE_QUERY,
    HistoryLengthError,
    ImageEncoder,
    MultimodalEncoder,
    OutOfVocabularyError,
    PerceiverResampler,
    ShapeMismatchError,
    StateEncoder,
    TextEncoder,
    Tokenizer,
    encode_image,
)

INSTR = "put the red ball on the blue bowl, the green block on the red plate, and the cyan ball on the green bowl"


@pytest.fixture(scope="module")
def enc_cfg():
    torch.manual_seed(0)
    return EncoderConfig(image_size=64, patch_size=8, vision_width=32, vision_layers=1, vision_heads=4,
                         resampled_tokens=8, resampler_layers=3, resampler_heads=8, d_model=32)


def test_image_tokens_count(enc_cfg):
    enc = ImageEncoder(enc_cfg)
    out = enc(torch.rand(2, 3, 64, 64))
    assert out.shape == (2, 65, 32)


def test_image_deterministic(enc_cfg):
    m = MultimodalEncoder(enc_cfg)
    r = np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)
    assert torch.equal(encode_image(m, r), encode_image(m, r.copy()))


def test_image_shape_mismatch(enc_cfg):
    enc = ImageEncoder(enc_cfg)
    with pytest.raises(ShapeMismatchError):
        enc(torch.rand(1, 3, 63, 63))
    with pytest.raises(ValueError):
        EncoderConfig(image_size=63, patch_size=8).validate()


@pytest.mark.parametrize("n", [65, 200])
def test_resampler_fixed_output_count(n):
    rs = PerceiverResampler(32, 32, 8, 3, 8)
    assert rs(torch.randn(2, n, 32)).shape == (2, 8, 32)


def test_resampler_permutation_invariant():
    torch.manual_seed(1)
    rs = PerceiverResampler(16, 16, 4, 3, 4).double()
    x = torch.randn(1, 30, 16, dtype=torch.float64)  # no positional encoding added
    perm = torch.randperm(30)
    assert torch.allclose(rs(x), rs(x[:, perm]), atol=1e-12)


def test_instruction_deterministic_and_oov(enc_cfg):
    te = TextEncoder(enc_cfg)
    ids = te.tokenizer.batch([INSTR, INSTR])
    out = te(ids)
    assert out.shape == (2, 32)
    assert torch.equal(out[0], out[1])
    with pytest.raises(OutOfVocabularyError):
        te.tokenizer.encode("put the zebra on the bowl")


def test_referent_nouns_map_to_distinct_ids(enc_cfg):
    tok = Tokenizer(enc_cfg.vocab)
    a = tok.encode("put the red ball on the blue bowl")
    b = tok.encode("put the green ball on the blue bowl")
    assert a != b and a[2] != b[2]


def test_vocab_file_round_trip(tmp_path, enc_cfg):
    tok = Tokenizer(enc_cfg.vocab)
    tok.save(tmp_path / "vocab.json")
    assert Tokenizer.load(tmp_path / "vocab.json").words == tok.words


def test_stage_changes_instruction_token(enc_cfg):
    te = TextEncoder(enc_cfg)
    ids = te.tokenizer.batch([INSTR, INSTR])
    out = te(ids, torch.tensor([0, 1]))
    assert not torch.allclose(out[0], out[1])


def test_state_encoder_rules():
    torch.manual_seed(0)
    se = StateEncoder(16)
    pose = torch.zeros(2, 6)
    out = se(pose, torch.tensor([0.0, 1.0]))
    assert not torch.allclose(out[0], out[1])
    # zero pose, open gripper: only biases and the [1, 0] one-hot column contribute
    with torch.no_grad():
        h = torch.cat([se.pose.bias, se.grip.bias + se.grip.weight[:, 0]])
        ref = se.mlp(h)
    assert torch.allclose(out[0], ref, atol=1e-6)
    with pytest.raises(ValueError):
        se(pose[:1], torch.tensor([0.5]))


def test_state_encoder_gradcheck(gradcheck):
    torch.manual_seed(0)
    se = StateEncoder(16).double()
    w = torch.randn(16, dtype=torch.float64)
    grip = torch.tensor([1.0, 0.0], dtype=torch.float64)
    err = gradcheck(lambda xs: (se(xs[0], grip) * w).sum(), [torch.randn(2, 6, dtype=torch.float64)])
    assert err <= 1e-4


def test_context_layout_counts():
    cfg = EncoderConfig(image_size=16, patch_size=4, vision_width=16, vision_layers=1, vision_heads=2,
                        resampled_tokens=8, resampler_layers=1, resampler_heads=2, d_model=16)
    m = MultimodalEncoder(cfg)
    B, T, R = 2, 7, 8
    tok = m.tokenizer.batch([INSTR] * B)
    q = torch.zeros(5, 16)
    seq = m.assemble(torch.randn(B, T, R, 16), torch.randn(B, T, R, 16), torch.zeros(B, T, 7), tok, None, q)
    assert seq.tokens.shape[1] == 7 * (8 + 8 + 1) + 1 + 5
    assert int((seq.roles == AFFORDANCE_QUERY).sum()) == 4
    assert int((seq.roles == ACTION_QUERY).sum()) == 1
    assert seq.timesteps.shape == seq.roles.shape
    assert int(seq.timesteps[-1]) == 6
    with pytest.raises(HistoryLengthError):
        m.assemble(torch.randn(B, 6, R, 16), torch.randn(B, 6, R, 16), torch.zeros(B, 6, 7), tok, None, q)


def test_token_counts_pure_function_of_config():
    cfg = preset("tiny").encoder
    m = MultimodalEncoder(cfg)
    a, b = m.encode_views(torch.rand(3, 3, 16, 16), "base"), m.encode_views(torch.zeros(5, 3, 16, 16), "hand")
    assert a.shape[1:] == b.shape[1:] == (cfg.resampled_tokens, cfg.d_model)
