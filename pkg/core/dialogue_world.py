"""
Synthetic Dialogue World
Generates small videos of entities drifting across the frame, each with its own
label, color, pattern and action, plus dialogues where later questions refer back
to an introduced entity by pronoun. Answers are deterministic templates that copy words from the question.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from core import tensor as tc
from core.encoders import VideoObjects, tokenize
from core.errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

LABELS = ("dog", "cat", "man", "woman", "ball", "car", "bird", "horse")
COLORS = ("red", "blue", "green", "yellow", "black", "white")
ACTIONS = ("walking", "running", "jumping", "sitting", "sleeping", "rolling")
PATTERNS = ("striped", "spotted", "plain", "checked", "dotted", "shiny")
NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight")
PRONOUNS = frozenset({"it", "he", "she", "they", "him", "her", "them", "its"})

MAX_ROUNDS = 10
MAX_ANSWER_WORDS = 29

# Attributes a pronoun question may ask about; each is unique to one entity of a world
ATTRIBUTES = ("action", "color", "label", "pattern")

# Round mix after the opening introduction
PRONOUN_SHARE = 0.9
INTRO_SHARE = 0.05


class WorldSpec(BaseModel):
    """Everything the generator needs; the seed also fixes the appearance signature tables"""

    seed: int = Field(7, ge=0)
    frames: int = Field(6, ge=1, description="T")
    objects: int = Field(3, ge=1, description="O, entities per video")
    d_v: int = Field(32, ge=1)
    rounds: int = Field(10, ge=1, le=MAX_ROUNDS)
    drift: float = Field(0.05, ge=0.0, description="Max per-frame center drift per axis")
    grid_size: int = Field(4, ge=1)
    appearance_noise: float = Field(0.1, ge=0.0)

    @model_validator(mode="after")
    def _feasible(self) -> "WorldSpec":
        distinct = min(len(LABELS), len(COLORS), len(ACTIONS), len(PATTERNS))
        if self.objects > distinct:
            raise ValueError(f"{self.objects} entities but only {distinct} distinct values per attribute")
        if self.objects > self.grid_size ** 2:
            raise ValueError(f"{self.objects} entities do not fit a {self.grid_size}x{self.grid_size} grid")
        return self

    @property
    def box_size(self) -> float:
        return 0.8 / self.grid_size

    @classmethod
    def from_config(cls, config, seed: Optional[int] = None) -> "WorldSpec":
        try:
            return cls(seed=config.seed if seed is None else seed, frames=config.T, objects=config.O,
                       d_v=config.d_v, rounds=config.rounds, drift=config.drift, grid_size=config.grid_size,
                       appearance_noise=config.appearance_noise)
        except ValueError as exc:
            raise ConfigError(f"Infeasible world: {exc}") from exc


@dataclass
class Entity:
    label: str
    color: str
    action: str
    pattern: str = "plain"

    @property
    def name(self) -> List[str]:
        return [self.pattern, self.color, self.label]


@dataclass
class World:
    video: VideoObjects
    entities: List[Entity]


@dataclass
class DialogueSample:
    """One round of one dialogue: everything needed to answer question r"""
    sample_id: str
    video: VideoObjects
    caption: List[str]
    turns: List[Tuple[List[str], List[str]]]
    round: int
    question: List[str]
    answer: List[str]
    referent: Optional[int] = None
    entity_labels: List[str] = field(default_factory=list)

    def validate(self) -> None:
        if not 1 <= self.round <= MAX_ROUNDS:
            raise ContractError(f"round {self.round} outside 1..{MAX_ROUNDS}")
        if len(self.turns) != self.round - 1:
            raise ContractError(f"round {self.round} needs {self.round - 1} prior turns, got {len(self.turns)}")
        if not self.question:
            raise ContractError("question must not be empty")
        if not 1 <= len(self.answer) <= MAX_ANSWER_WORDS:
            raise ContractError(f"answer length {len(self.answer)} outside 1..{MAX_ANSWER_WORDS}")
        if self.referent is not None and not 0 <= self.referent < self.round:
            raise ContractError(f"referent {self.referent} outside the {self.round} history units")
        self.video.validate()

    @property
    def has_pronoun(self) -> bool:
        return any(w in PRONOUNS for w in self.question)


def signature_tables(spec: WorldSpec) -> Dict[str, np.ndarray]:
    """Fixed appearance signatures per attribute value; shared by every world of a spec"""
    rng = tc.make_rng(spec.seed)
    scale = 1.0 / np.sqrt(spec.d_v)
    return {
        "label": rng.standard_normal((len(LABELS), spec.d_v)) * scale * 2.0,
        "color": rng.standard_normal((len(COLORS), spec.d_v)) * scale,
        "action": rng.standard_normal((len(ACTIONS), spec.d_v)) * scale,
        "pattern": rng.standard_normal((len(PATTERNS), spec.d_v)) * scale,
    }


def generate_world(spec: WorldSpec, rng: Optional[np.random.Generator] = None,
                   tables: Optional[Dict[str, np.ndarray]] = None) -> World:
    """
    Place O entities on distinct grid cells and let them drift for T frames

    Args:
        spec: Generator settings
        rng: Source of randomness (defaults to a generator seeded by spec.seed)
        tables: Signature tables (defaults to signature_tables(spec))

    Returns:
        World with T x O object records; object slot o is entity o in every frame
    """
    rng = rng if rng is not None else tc.make_rng(spec.seed)
    tables = tables if tables is not None else signature_tables(spec)
    T, O, size = spec.frames, spec.objects, spec.box_size

    label_ids = rng.choice(len(LABELS), size=O, replace=False)
    color_ids = rng.choice(len(COLORS), size=O, replace=False)
    action_ids = rng.choice(len(ACTIONS), size=O, replace=False)
    pattern_ids = rng.choice(len(PATTERNS), size=O, replace=False)
    entities = [Entity(LABELS[l], COLORS[c], ACTIONS[a], PATTERNS[p])
                for l, c, a, p in zip(label_ids, color_ids, action_ids, pattern_ids)]

    cells = rng.choice(spec.grid_size ** 2, size=O, replace=False)
    centers = np.stack([(cells % spec.grid_size + 0.5) / spec.grid_size,
                        (cells // spec.grid_size + 0.5) / spec.grid_size], axis=1)
    lo, hi = size / 2.0, 1.0 - size / 2.0

    boxes = np.zeros((T, O, 4))
    appearance = np.zeros((T, O, spec.d_v))
    signature = (tables["label"][label_ids] + tables["color"][color_ids] + tables["action"][action_ids]
                 + tables["pattern"][pattern_ids])
    for t in range(T):
        if t > 0:
            centers = np.clip(centers + rng.uniform(-spec.drift, spec.drift, size=centers.shape), lo, hi)
        boxes[t, :, 0:2] = centers - size / 2.0
        boxes[t, :, 2:4] = size
        appearance[t] = signature + spec.appearance_noise * rng.standard_normal((O, spec.d_v))
    video = VideoObjects(appearance=appearance, boxes=boxes, labels=[[e.label for e in entities] for _ in range(T)])
    return World(video=video, entities=entities)


def caption_for(entities: Sequence[Entity]) -> List[str]:
    """Scene summary that names no entity attribute, so only introductions identify an entity"""
    return tokenize(f"{NUMBERS[len(entities)]} objects move around the scene")


def _intro_turn(entity: Entity) -> Tuple[List[str], List[str]]:
    name = " ".join(entity.name)
    return tokenize(f"what about the {name}"), tokenize(f"the {name} is {entity.action}")


def _pronoun_turn(entity: Entity, attribute: str) -> Tuple[List[str], List[str]]:
    if attribute == "action":
        return tokenize("what is it doing"), tokenize(f"it is {entity.action}")
    if attribute == "color":
        return tokenize("what color is it"), tokenize(f"it is {entity.color}")
    if attribute == "pattern":
        return tokenize("what pattern does it have"), tokenize(f"it is {entity.pattern}")
    return tokenize("what kind of thing is it"), tokenize(f"it is a {entity.label}")


def _count_turn(count: int) -> Tuple[List[str], List[str]]:
    return tokenize("how many objects are there"), tokenize(f"there are {NUMBERS[count]} objects")


def generate_dialogue(world: World, r_max: int, rng: np.random.Generator,
                      dialogue_id: str = "d0") -> List[DialogueSample]:
    """
    One dialogue of r_max rounds, returned as one sample per round

    Round 1 introduces an entity by name; later rounds mostly ask about the last
    introduced entity by pronoun, whose history unit is recorded as the referent.
    Each entity is introduced at most once and each of its attributes is asked at
    most once, so the introducing turn is the only history unit holding the answer.
    """
    if len(world.entities) < 2:
        raise ContractError("a dialogue world needs at least two entities")
    if not 1 <= r_max <= MAX_ROUNDS:
        raise ContractError(f"r_max={r_max} outside 1..{MAX_ROUNDS}")
    caption = caption_for(world.entities)
    turns: List[Tuple[List[str], List[str]]] = []
    samples = []
    unseen = list(range(len(world.entities)))
    focus: Optional[int] = None
    focus_turn: Optional[int] = None
    unasked: List[str] = []
    for r in range(1, r_max + 1):
        draw = rng.random()
        referent = None
        if unasked and draw < PRONOUN_SHARE:
            attribute = unasked.pop(int(rng.integers(len(unasked))))
            question, answer = _pronoun_turn(world.entities[focus], attribute)
            referent = focus_turn
        elif unseen and (not unasked or draw < PRONOUN_SHARE + INTRO_SHARE):
            focus = unseen.pop(int(rng.integers(len(unseen))))
            focus_turn = r
            unasked = list(ATTRIBUTES)
            question, answer = _intro_turn(world.entities[focus])
        else:
            question, answer = _count_turn(len(world.entities))
        samples.append(DialogueSample(
            sample_id=f"{dialogue_id}-r{r}", video=world.video, caption=list(caption),
            turns=[(list(q), list(a)) for q, a in turns], round=r, question=question, answer=answer,
            referent=referent, entity_labels=[e.label for e in world.entities],
        ))
        turns.append((question, answer))
    return samples


def generate_dataset(spec: WorldSpec, n_samples: int, seed: int) -> List[DialogueSample]:
    """
    Samples from fresh worlds until n_samples are collected

    Deterministic in (spec, seed); the spec seed fixes appearance signatures,
    the sample seed fixes worlds and dialogues.
    """
    rng = tc.make_rng(seed)
    tables = signature_tables(spec)
    samples: List[DialogueSample] = []
    dialogue = 0
    while len(samples) < n_samples:
        world = generate_world(spec, rng, tables)
        samples.extend(generate_dialogue(world, spec.rounds, rng, dialogue_id=f"s{seed}-d{dialogue}"))
        dialogue += 1
    samples = samples[:n_samples]
    pronoun_share = np.mean([s.has_pronoun for s in samples])
    logger.info("generated %d samples from %d worlds, %.0f%% with pronouns", len(samples), dialogue, 100 * pronoun_share)
    return samples


def split_seeds(seed: int) -> Tuple[int, int]:
    """Independent train/eval sample seeds derived from one seed"""
    train, held_out = np.random.SeedSequence(seed).spawn(2)
    return int(train.generate_state(1)[0]), int(held_out.generate_state(1)[0])
