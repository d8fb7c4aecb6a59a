import numpy as np
import pytest

from streamcache import BBox, StepRecord, Token, TokenFactory, TokenKind


def test_factory_ids_strictly_increase(factory):
    ids = [factory.visual(i, np.zeros(3)).id for i in range(5)]
    ids += [factory.text(0, np.zeros(3)).id, factory.marker(0, np.zeros(3)).id]
    assert ids == sorted(ids)
    assert len(set(ids)) == len(ids)


def test_kind_field_requirements(factory):
    with pytest.raises(ValueError):
        Token(0, TokenKind.VISUAL_FRAME, np.zeros(3)).validate()
    with pytest.raises(ValueError):
        Token(1, TokenKind.TEXT, np.zeros(3)).validate()
    with pytest.raises(ValueError):
        Token(2, TokenKind.LONG_TERM_MARKER, np.zeros(3)).validate()
    Token(3, TokenKind.PROMPT, np.zeros(3)).validate()


def test_token_round_trip(factory):
    tok = factory.text(7, np.array([0.25, -1.5, 3.0]))
    tok.entry_position = 11
    back = Token.from_dict(tok.to_dict())
    assert back.id == tok.id
    assert back.kind is tok.kind
    assert back.step_id == tok.step_id
    assert back.entry_position == 11
    np.testing.assert_array_equal(back.embedding, tok.embedding)


def test_step_record_validation():
    StepRecord(0, "step-00", 0.0, 2.0, 5).validate()
    with pytest.raises(ValueError):
        StepRecord(0, "step-00", 2.0, 2.0, 5).validate()
    with pytest.raises(ValueError):
        StepRecord(0, "step-00", 0.0, 2.0, 0).validate()


def test_bbox_corners_and_clamp():
    box = BBox(0.1, 0.5, 0.4, 0.2).validate()
    np.testing.assert_allclose(box.corners(), [-0.1, 0.4, 0.3, 0.6])
    np.testing.assert_allclose(box.corners(clamp=True), [0.0, 0.4, 0.3, 0.6])
    with pytest.raises(ValueError):
        BBox(0.5, 0.5, 0.0, 0.1).validate()
    round_trip = BBox.from_array(box.as_array())
    assert round_trip == box
