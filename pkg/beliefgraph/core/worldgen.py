#!/usr/bin/env python3
"""
World generation module for the belief-graph laboratory.
Handles deterministic generation and simulation of choice-based cooking
games, ground-truth graph extraction and pretraining-corpus collection.
"""

import hashlib
import logging
import random
import re
from collections import deque
from dataclasses import dataclass, replace
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from beliefgraph.core.kgraph import DiscreteGraph, NamedTriple
from beliefgraph.core.vocab import (
    DOORS, FURNITURE, INGREDIENTS, ROOMS, SPECIAL_TOKENS, STATE_WORDS,
    Vocab, WordVocab, tokenize,
)
from beliefgraph.errors import DomainError

logger = logging.getLogger(__name__)

MAX_STEPS = 50

DIRECTIONS: Dict[str, Tuple[int, int]] = {
    "north": (0, 1), "south": (0, -1), "east": (1, 0), "west": (-1, 0),
}
OPPOSITE = {"north": "south", "south": "north", "east": "west", "west": "east"}

# Furniture: home room and whether it opens
FURNITURE_HOME = {
    "fridge": "kitchen", "counter": "kitchen", "table": "kitchen",
    "stove": "kitchen", "oven": "kitchen", "shelf": "pantry",
    "toolbox": "shed", "workbench": "shed", "bbq": "backyard",
}
CONTAINERS = frozenset({"fridge", "oven", "toolbox"})
STORAGE = ("fridge", "counter", "table", "shelf", "toolbox", "workbench")

CUT_VERBS = {"sliced": "slice", "diced": "dice", "chopped": "chop"}
COOK_VERBS = {"fried": "fry", "roasted": "roast", "grilled": "grill"}
COOK_TOOLS = {"fried": "stove", "roasted": "oven", "grilled": "bbq"}
UNCUT = "uncut"
RAW = "raw"

ROOM_FLAVOR = (
    "you smell something delicious .",
    "it is a rather ordinary place .",
    "the light here is dim .",
    "you hear a faint humming noise .",
    "the floor creaks under your feet .",
    "nothing seems out of place .",
)

# Observation templates; every word of an observation comes from a
# template or from an entity/direction name.
TEMPLATES = {
    "intro": "you are hungry ! let us cook a delicious meal . check the cookbook in the kitchen for the recipe .",
    "header": "-= {room} =-",
    "room": "you are in the {room} .",
    "container_closed": "you see {art} closed {obj} .",
    "container_open": "you see {art} open {obj} .",
    "container_content": "inside the {obj} you see {items} .",
    "container_empty": "the {obj} is empty .",
    "support": "you see {art} {obj} .",
    "support_content": "on the {obj} you see {items} .",
    "support_empty": "there is nothing on the {obj} .",
    "floor": "you see {items} on the floor .",
    "exit": "there is an exit to the {dir} .",
    "door": "there is {art} {state} {obj} leading {dir} .",
    "take": "you take the {obj} .",
    "drop": "you drop the {obj} on the floor .",
    "open": "you open the {obj} .",
    "open_reveal": "you open the {obj} , revealing {items} .",
    "close": "you close the {obj} .",
    "recipe": "you read the cookbook . ingredients : {items} . directions : {steps} prepare meal .",
    "recipe_step": "{verb} the {obj} .",
    "cut": "you {verb} the {obj} with the knife .",
    "cook": "you {verb} the {obj} with the {tool} .",
    "wrong": "oh no ! the {obj} is ruined . you lost !",
    "prepare": "adding the meal to your inventory . you prepare the meal .",
    "eat": "you eat the meal . it is delicious . you won !",
    "timeout": "you are too tired to continue . you lost !",
    "list_sep": "{a} , {b}",
    "list_last": "{a} and {b}",
}
EXTRA_WORDS = ("a", "an", "restart", "reverse", "add", "delete", "with", "from",
               "go", "take", "drop", "open", "close", "examine", "prepare", "eat")


@dataclass(frozen=True)
class LevelProfile:
    """Difficulty parameters of one game level"""

    locations: int
    recipe_size: int
    cut: bool
    cook: bool

    @property
    def max_score(self) -> int:
        return self.recipe_size * (1 + int(self.cut) + int(self.cook)) + 2


LEVELS: Dict[int, LevelProfile] = {
    1: LevelProfile(locations=1, recipe_size=1, cut=True, cook=False),
    2: LevelProfile(locations=1, recipe_size=1, cut=True, cook=True),
    3: LevelProfile(locations=9, recipe_size=1, cut=False, cook=False),
    4: LevelProfile(locations=6, recipe_size=3, cut=True, cook=True),
}


@dataclass(frozen=True)
class RecipeItem:
    ingredient: str
    cut_state: str
    cook_state: str


@dataclass(frozen=True)
class Exit:
    """Undirected map edge: `neighbor` lies `direction` of `room`"""

    room: str
    direction: str
    neighbor: str
    door: Optional[str] = None


@dataclass(frozen=True)
class Placement:
    """Initial location of a portable object"""

    entity: str
    room: str
    holder: Optional[str] = None


@dataclass(frozen=True)
class GameSpec:
    """Immutable description of one generated game"""

    seed: int
    difficulty: int
    level: int
    rooms: Tuple[str, ...]
    exits: Tuple[Exit, ...]
    recipe: Tuple[RecipeItem, ...]
    placements: Tuple[Placement, ...]
    start_room: str
    max_score: int
    max_steps: int = MAX_STEPS

    @property
    def game_id(self) -> str:
        return f"L{self.difficulty}-{self.seed}"

    @property
    def furniture(self) -> Tuple[str, ...]:
        return tuple(f for f in FURNITURE if FURNITURE_HOME[f] in self.rooms)

    @property
    def doors(self) -> Tuple[str, ...]:
        return tuple(e.door for e in self.exits if e.door)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "difficulty": self.difficulty,
            "level": self.level,
            "rooms": list(self.rooms),
            "exits": [[e.room, e.direction, e.neighbor, e.door] for e in self.exits],
            "recipe": [[r.ingredient, r.cut_state, r.cook_state] for r in self.recipe],
            "placements": [[p.entity, p.room, p.holder] for p in self.placements],
            "start_room": self.start_room,
            "max_score": self.max_score,
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GameSpec":
        return cls(
            seed=int(data["seed"]),
            difficulty=int(data["difficulty"]),
            level=int(data["level"]),
            rooms=tuple(data["rooms"]),
            exits=tuple(Exit(*row) for row in data["exits"]),
            recipe=tuple(RecipeItem(*row) for row in data["recipe"]),
            placements=tuple(Placement(*row) for row in data["placements"]),
            start_room=data["start_room"],
            max_score=int(data["max_score"]),
            max_steps=int(data.get("max_steps", MAX_STEPS)),
        )


@dataclass(frozen=True)
class Observation:
    """Tokenized text the player receives"""

    tokens: Tuple[str, ...]
    kind: str  # "room" or "feedback"

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True, order=True)
class ActionCandidate:
    """Admissible command as a token tuple"""

    tokens: Tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "ActionCandidate":
        return cls(tuple(tokenize(text)))

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class GameState:
    """Single-owner snapshot of a running game"""

    spec: GameSpec
    facts: FrozenSet[NamedTriple]
    seen: FrozenSet[NamedTriple]
    visited: FrozenSet[str]
    recipe_known: bool = False
    rewarded: FrozenSet[str] = frozenset()
    score: int = 0
    step_count: int = 0
    status: str = "ongoing"

    @property
    def player_location(self) -> str:
        return _location(self.facts, "player")[0]

    @property
    def inventory(self) -> Tuple[str, ...]:
        return tuple(sorted(h for h, t, r in self.facts if t == "player" and r == "in"))


@dataclass(frozen=True)
class TransitionRecord:
    """One pretraining sample (O_{t-1}, A_{t-1}, O_t) with graph snapshots"""

    game_id: str
    t: int
    obs_prev: Observation
    action: Tuple[str, ...]
    obs: Observation
    gseen_prev: DiscreteGraph
    gseen: DiscreteGraph
    gfull: DiscreteGraph
    done: bool
    gfull_prev: Optional[DiscreteGraph] = None
    candidates: Tuple[Tuple[str, ...], ...] = ()
    reward: int = 0

    def to_json(self) -> Dict[str, Any]:
        return {
            "game_id": self.game_id,
            "t": self.t,
            "obs_prev": {"tokens": list(self.obs_prev.tokens), "kind": self.obs_prev.kind},
            "action": list(self.action),
            "obs": {"tokens": list(self.obs.tokens), "kind": self.obs.kind},
            "gseen_prev": self.gseen_prev.to_list(),
            "gseen": self.gseen.to_list(),
            "gfull": self.gfull.to_list(),
            "gfull_prev": self.gfull_prev.to_list() if self.gfull_prev is not None else None,
            "done": self.done,
            "candidates": [list(c) for c in self.candidates],
            "reward": self.reward,
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any], vocab: Vocab) -> "TransitionRecord":
        gfull_prev = data.get("gfull_prev")
        return cls(
            game_id=data["game_id"],
            t=int(data["t"]),
            obs_prev=Observation(tuple(data["obs_prev"]["tokens"]), data["obs_prev"]["kind"]),
            action=tuple(data["action"]),
            obs=Observation(tuple(data["obs"]["tokens"]), data["obs"]["kind"]),
            gseen_prev=DiscreteGraph.from_list(vocab, data["gseen_prev"]),
            gseen=DiscreteGraph.from_list(vocab, data["gseen"]),
            gfull=DiscreteGraph.from_list(vocab, data["gfull"]),
            done=bool(data["done"]),
            gfull_prev=DiscreteGraph.from_list(vocab, gfull_prev) if gfull_prev is not None else None,
            candidates=tuple(tuple(c) for c in data.get("candidates", ())),
            reward=int(data.get("reward", 0)),
        )


# ---------------------------------------------------------------------------
# Fact helpers

LOCATION_RELATIONS = ("at", "in", "on")
RECIPE_RELATIONS = ("part_of", "needs")


def _location(facts: Iterable[NamedTriple], entity: str) -> Tuple[str, str]:
    """(holder, relation) of an entity"""
    for h, t, r in facts:
        if h == entity and r in LOCATION_RELATIONS:
            return t, r
    raise DomainError(f"{entity!r} has no location")


def _room_of(facts: FrozenSet[NamedTriple], entity: str) -> str:
    holder, _ = _location(facts, entity)
    while holder not in ROOMS:
        holder, _ = _location(facts, holder)
    return holder


def _is_open(facts: FrozenSet[NamedTriple], entity: str) -> bool:
    return (entity, "open", "is") in facts


def _states(facts: FrozenSet[NamedTriple], entity: str) -> Set[str]:
    return {t for h, t, r in facts if h == entity and r == "is"}


def _exits_from(spec: GameSpec, room: str) -> List[Tuple[str, str, Optional[str]]]:
    """(direction, neighbor, door) triples leaving a room, in compass order"""
    found = []
    for e in spec.exits:
        if e.room == room:
            found.append((e.direction, e.neighbor, e.door))
        elif e.neighbor == room:
            found.append((OPPOSITE[e.direction], e.room, e.door))
    order = list(DIRECTIONS)
    return sorted(found, key=lambda x: order.index(x[0]))


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _say(key: str, **kwargs) -> str:
    return TEMPLATES[key].format(**kwargs)


def _listing(names: Sequence[str]) -> str:
    items = [f"{_article(n)} {n}" for n in names]
    if len(items) == 1:
        return items[0]
    text = items[0]
    for item in items[1:-1]:
        text = _say("list_sep", a=text, b=item)
    return _say("list_last", a=text, b=items[-1])


# ---------------------------------------------------------------------------
# Generation


def _build_map(rng: random.Random, count: int, doors: List[str]) -> Tuple[Tuple[str, ...], Tuple[Exit, ...]]:
    """Random tree of rooms laid out on a grid, kitchen first"""
    others = [r for r in ROOMS if r != "kitchen"]
    chosen = ["kitchen"] + rng.sample(others, count - 1)
    coords = {"kitchen": (0, 0)}
    taken = {(0, 0)}
    exits: List[Exit] = []
    for room in chosen[1:]:
        while True:
            anchor = rng.choice([r for r in chosen if r in coords])
            direction = rng.choice(list(DIRECTIONS))
            dx, dy = DIRECTIONS[direction]
            x, y = coords[anchor]
            cell = (x + dx, y + dy)
            if cell not in taken:
                break
        coords[room] = cell
        taken.add(cell)
        door = None
        if doors and rng.random() < 0.4:
            door = doors.pop(0)
        exits.append(Exit(anchor, direction, room, door))
    return tuple(chosen), tuple(exits)


def _spots(rooms: Sequence[str], storage_only: bool = False) -> List[Tuple[str, Optional[str]]]:
    spots: List[Tuple[str, Optional[str]]] = []
    for room in rooms:
        if not storage_only:
            spots.append((room, None))
        spots.extend((room, f) for f in STORAGE if FURNITURE_HOME[f] == room)
    return spots


def _draw_spec(difficulty: int, seed: int, rng: random.Random) -> GameSpec:
    level = difficulty if difficulty < 5 else rng.randint(1, 4)
    profile = LEVELS[level]

    doors = list(DOORS)
    rng.shuffle(doors)
    rooms, exits = _build_map(rng, profile.locations, doors)

    cook_options = [s for s, tool in COOK_TOOLS.items() if FURNITURE_HOME[tool] in rooms]
    ingredients = rng.sample(list(INGREDIENTS), profile.recipe_size)
    recipe = tuple(
        RecipeItem(
            ing,
            rng.choice(list(CUT_VERBS)) if profile.cut else UNCUT,
            rng.choice(cook_options) if profile.cook else RAW,
        )
        for ing in ingredients
    )

    placements = [Placement("cookbook", "kitchen", "table")]
    if profile.locations == 1:
        item_spots = [("kitchen", "fridge"), ("kitchen", "counter"), ("kitchen", "table")]
        knife_spots = [("kitchen", "counter"), ("kitchen", "table")]
    else:
        item_spots = _spots(rooms)
        knife_spots = item_spots
    if profile.cut:
        room, holder = rng.choice(knife_spots)
        placements.append(Placement("knife", room, holder))
    for ing in ingredients:
        room, holder = rng.choice(item_spots)
        placements.append(Placement(ing, room, holder))

    # One distractor per room, while non-recipe ingredients remain
    if level >= 2:
        pool = [i for i in INGREDIENTS if i not in ingredients]
        rng.shuffle(pool)
        for room in rooms:
            if not pool:
                break
            spot_room, holder = rng.choice([s for s in _spots([room]) if s[0] == room])
            placements.append(Placement(pool.pop(0), spot_room, holder))

    start_room = "kitchen" if profile.locations == 1 else rng.choice(list(rooms))
    return GameSpec(
        seed=seed,
        difficulty=difficulty,
        level=level,
        rooms=rooms,
        exits=exits,
        recipe=recipe,
        placements=tuple(placements),
        start_room=start_room,
        max_score=profile.max_score,
    )


def generate_game(difficulty: int, seed: int) -> GameSpec:
    """Generate a solvable game

    Args:
        difficulty: Level 1..4, or 5 for a uniform mixture of levels 1..4
        seed: Integer seed; the same (difficulty, seed) gives the same spec

    Returns:
        GameSpec whose walkthrough fits within max_steps
    """
    if difficulty not in (1, 2, 3, 4, 5):
        raise DomainError(f"difficulty must be in 1..5, got {difficulty}")
    rng = random.Random(f"game:{difficulty}:{seed}")
    for _ in range(100):
        spec = _draw_spec(difficulty, seed, rng)
        if len(walkthrough(spec)) < spec.max_steps:
            return spec
    raise DomainError(f"could not generate a game for difficulty {difficulty}, seed {seed}")


# ---------------------------------------------------------------------------
# Simulation


def _initial_facts(spec: GameSpec) -> FrozenSet[NamedTriple]:
    facts: Set[NamedTriple] = {("player", spec.start_room, "at")}
    for e in spec.exits:
        facts.add((e.neighbor, e.room, f"{e.direction}_of"))
        facts.add((e.room, e.neighbor, f"{OPPOSITE[e.direction]}_of"))
        if e.door:
            facts.add((e.door, e.room, f"{e.direction}_of"))
            facts.add((e.door, e.neighbor, f"{OPPOSITE[e.direction]}_of"))
            facts.add((e.door, "closed", "is"))
    for f in spec.furniture:
        facts.add((f, FURNITURE_HOME[f], "in"))
        if f in CONTAINERS:
            facts.add((f, "closed", "is"))
    for p in spec.placements:
        if p.holder is None:
            facts.add((p.entity, p.room, "in"))
        else:
            facts.add((p.entity, p.holder, "on" if p.holder not in CONTAINERS else "in"))
    for item in spec.recipe:
        facts.add((item.ingredient, "cookbook", "part_of"))
        if item.cut_state != UNCUT:
            facts.add((item.ingredient, item.cut_state, "needs"))
        if item.cook_state != RAW:
            facts.add((item.ingredient, item.cook_state, "needs"))
    return frozenset(facts)


def _perceivable(facts: FrozenSet[NamedTriple], spec: GameSpec) -> Set[str]:
    """Entities the player can currently perceive"""
    room = _location(facts, "player")[0]
    seen = {"player"}
    for h, t, r in facts:
        if r == "in" and t in (room, "player"):
            seen.add(h)
    for h, t, r in facts:
        if t in seen and t not in ROOMS and t != "player":
            if r == "on" or (r == "in" and (t not in CONTAINERS or _is_open(facts, t))):
                seen.add(h)
    # Contents of carried things (ingredients inside the meal)
    for h, t, r in facts:
        if r == "in" and (t, "player", "in") in facts:
            seen.add(h)
    for _, _, door in _exits_from(spec, room):
        if door:
            seen.add(door)
    return seen


def _perceived_facts(facts: FrozenSet[NamedTriple], spec: GameSpec, visited: FrozenSet[str],
                     recipe_known: bool) -> Set[NamedTriple]:
    room = _location(facts, "player")[0]
    entities = _perceivable(facts, spec)
    found: Set[NamedTriple] = set()
    for h, t, r in facts:
        if h in entities and (r in LOCATION_RELATIONS or r == "is"):
            found.add((h, t, r))
        elif h in DOORS and h in entities and t == room and r.endswith("_of"):
            found.add((h, t, r))
        elif h in ROOMS and t in ROOMS and h in visited and t in visited:
            found.add((h, t, r))
        elif recipe_known and r in RECIPE_RELATIONS:
            found.add((h, t, r))
    return found


def _update_seen(seen: FrozenSet[NamedTriple], facts: FrozenSet[NamedTriple], spec: GameSpec,
                 visited: FrozenSet[str], recipe_known: bool) -> FrozenSet[NamedTriple]:
    """Merge current perception into the witnessed facts, retracting stale ones

    A witnessed fact survives while it still holds, or while its head is out
    of sight but still exists. Facts about consumed entities are dropped.
    """
    entities = _perceivable(facts, spec)
    existing = {h for h, _, r in facts if r not in RECIPE_RELATIONS}
    kept = {f for f in seen if f in facts or (f[0] not in entities and f[0] in existing)}
    return frozenset(kept | _perceived_facts(facts, spec, visited, recipe_known))


def _describe_room(state: GameState) -> List[str]:
    facts, spec = state.facts, state.spec
    room = state.player_location
    flavor_rng = random.Random(f"flavor:{spec.seed}:{room}")
    parts = [_say("header", room=room), _say("room", room=room), flavor_rng.choice(ROOM_FLAVOR)]
    for f in FURNITURE:
        if (f, room, "in") not in facts:
            continue
        contents = sorted(h for h, t, r in facts if t == f and r in ("in", "on"))
        if f in CONTAINERS:
            if _is_open(facts, f):
                parts.append(_say("container_open", art=_article("open"), obj=f))
                parts.append(_say("container_content", obj=f, items=_listing(contents))
                             if contents else _say("container_empty", obj=f))
            else:
                parts.append(_say("container_closed", art=_article("closed"), obj=f))
        else:
            parts.append(_say("support", art=_article(f), obj=f))
            parts.append(_say("support_content", obj=f, items=_listing(contents))
                         if contents else _say("support_empty", obj=f))
    floor = sorted(h for h, t, r in facts if t == room and r == "in" and h not in FURNITURE and h != "player")
    if floor:
        parts.append(_say("floor", items=_listing(floor)))
    for direction, _, door in _exits_from(spec, room):
        if door:
            state_word = "open" if _is_open(facts, door) else "closed"
            parts.append(_say("door", art=_article(state_word), state=state_word, obj=door, dir=direction))
        else:
            parts.append(_say("exit", dir=direction))
    return parts


def _observation(state: GameState, feedback: Optional[List[str]]) -> Observation:
    if feedback is None:
        return Observation(tuple(tokenize(" ".join(_describe_room(state)))), "room")
    return Observation(tuple(tokenize(" ".join(feedback))), "feedback")


def _recipe(spec: GameSpec) -> Dict[str, RecipeItem]:
    return {item.ingredient: item for item in spec.recipe}


def admissible_actions(state: GameState) -> List[ActionCandidate]:
    """Candidate commands for the current state, sorted by text"""
    if state.status != "ongoing":
        return []
    facts, spec = state.facts, state.spec
    room = state.player_location
    carried = set(state.inventory)
    visible = _perceivable(facts, spec)
    texts: List[str] = []

    for direction, _, door in _exits_from(spec, room):
        if door is None or _is_open(facts, door):
            texts.append(f"go {direction}")
        texts.append(f"{'close' if door and _is_open(facts, door) else 'open'} {door}" if door else "")
    for f in spec.furniture:
        if f in CONTAINERS and (f, room, "in") in facts:
            texts.append(f"{'close' if _is_open(facts, f) else 'open'} {f}")
    for item in sorted(visible):
        if (item, "meal", "in") in facts:
            continue
        if item in INGREDIENTS or item == "knife":
            if item in carried:
                texts.append(f"drop {item}")
            else:
                texts.append(f"take {item}")
    if "cookbook" in visible:
        texts.append("examine cookbook")
    present_tools = {f for f in spec.furniture if (f, room, "in") in facts}
    for item in sorted(carried & set(INGREDIENTS)):
        states = _states(facts, item)
        if "knife" in carried and not states & set(CUT_VERBS):
            texts.extend(f"{verb} {item} with knife" for verb in CUT_VERBS.values())
        if not states & set(COOK_VERBS):
            for cook_state, tool in COOK_TOOLS.items():
                if tool in present_tools:
                    texts.append(f"{COOK_VERBS[cook_state]} {item} with {tool}")
    if room == "kitchen" and "meal" not in carried and _meal_ready(state):
        texts.append("prepare meal")
    if "meal" in carried:
        texts.append("eat meal")
    return sorted({ActionCandidate.parse(t) for t in texts if t})


def _meal_ready(state: GameState) -> bool:
    carried = set(state.inventory)
    for item in state.spec.recipe:
        if item.ingredient not in carried:
            return False
        states = _states(state.facts, item.ingredient)
        if item.cut_state != UNCUT and item.cut_state not in states:
            return False
        if item.cook_state != RAW and item.cook_state not in states:
            return False
    return True


def reset(spec: GameSpec) -> Tuple[GameState, Observation, List[ActionCandidate]]:
    """Start a game

    Args:
        spec: Game to play

    Returns:
        Tuple of (initial state, observation of the starting room, candidates)
    """
    facts = _initial_facts(spec)
    visited = frozenset({spec.start_room})
    seen = frozenset(_perceived_facts(facts, spec, visited, False))
    state = GameState(spec=spec, facts=facts, seen=seen, visited=visited)
    obs = Observation(tuple(tokenize(_say("intro") + " " + " ".join(_describe_room(state)))), "room")
    return state, obs, admissible_actions(state)


def _object_of(tokens: Tuple[str, ...], start: int, stop: Optional[int] = None) -> str:
    return " ".join(tokens[start:stop])


def step(state: GameState, action: ActionCandidate
         ) -> Tuple[GameState, Observation, int, bool, List[ActionCandidate]]:
    """Execute one admissible command

    Args:
        state: Current state (must be ongoing)
        action: One of the current candidates

    Returns:
        Tuple of (new state, observation, reward, done, new candidates)
    """
    if state.status != "ongoing":
        raise DomainError("game is already over")
    if action not in admissible_actions(state):
        raise DomainError(f"inadmissible action: {action.text!r}")

    spec = state.spec
    facts = set(state.facts)
    tokens = action.tokens
    verb = tokens[0]
    room = state.player_location
    recipe = _recipe(spec)
    reward = 0
    status = "ongoing"
    rewarded = set(state.rewarded)
    visited = set(state.visited)
    recipe_known = state.recipe_known
    feedback: Optional[List[str]] = None

    def grant(key: str) -> int:
        if key in rewarded:
            return 0
        rewarded.add(key)
        return 1

    if verb == "go":
        direction = tokens[1]
        neighbor = next(n for d, n, _ in _exits_from(spec, room) if d == direction)
        facts.discard(("player", room, "at"))
        facts.add(("player", neighbor, "at"))
        visited.add(neighbor)
    elif verb in ("open", "close"):
        obj = _object_of(tokens, 1)
        old, new = ("closed", "open") if verb == "open" else ("open", "closed")
        facts.discard((obj, old, "is"))
        facts.add((obj, new, "is"))
        contents = sorted(h for h, t, r in facts if t == obj and r == "in")
        if verb == "open" and contents:
            feedback = [_say("open_reveal", obj=obj, items=_listing(contents))]
        else:
            feedback = [_say(verb, obj=obj)]
    elif verb == "take":
        obj = _object_of(tokens, 1)
        holder, rel = _location(facts, obj)
        facts.discard((obj, holder, rel))
        facts.add((obj, "player", "in"))
        if obj in recipe:
            reward += grant(f"take:{obj}")
        feedback = [_say("take", obj=obj)]
    elif verb == "drop":
        obj = _object_of(tokens, 1)
        facts.discard((obj, "player", "in"))
        facts.add((obj, room, "in"))
        feedback = [_say("drop", obj=obj)]
    elif verb == "examine":
        recipe_known = True
        steps = []
        for item in spec.recipe:
            if item.cut_state != UNCUT:
                steps.append(_say("recipe_step", verb=CUT_VERBS[item.cut_state], obj=item.ingredient))
            if item.cook_state != RAW:
                steps.append(_say("recipe_step", verb=COOK_VERBS[item.cook_state], obj=item.ingredient))
        feedback = [_say("recipe", items=_listing([i.ingredient for i in spec.recipe]), steps=" ".join(steps))]
    elif verb in CUT_VERBS.values() or verb in COOK_VERBS.values():
        obj = _object_of(tokens, 1, -2)
        tool = tokens[-1]
        is_cut = verb in CUT_VERBS.values()
        verbs = CUT_VERBS if is_cut else COOK_VERBS
        done_state = next(s for s, v in verbs.items() if v == verb)
        facts.add((obj, done_state, "is"))
        feedback = [_say("cut", verb=verb, obj=obj) if is_cut else _say("cook", verb=verb, obj=obj, tool=tool)]
        if obj in recipe:
            wanted = recipe[obj].cut_state if is_cut else recipe[obj].cook_state
            if wanted == done_state:
                reward += grant(f"{'cut' if is_cut else 'cook'}:{obj}")
            else:
                status = "lost"
                feedback.append(_say("wrong", obj=obj))
    elif verb == "prepare":
        for item in spec.recipe:
            facts.discard((item.ingredient, "player", "in"))
            facts.add((item.ingredient, "meal", "in"))
        facts.add(("meal", "player", "in"))
        reward += grant("prepare")
        feedback = [_say("prepare")]
    elif verb == "eat":
        consumed = {"meal"} | {h for h, t, r in facts if t == "meal" and r == "in"}
        facts = {f for f in facts if f[0] not in consumed or f[2] in RECIPE_RELATIONS}
        reward += grant("eat")
        status = "won"
        feedback = [_say("eat")]
    else:
        raise DomainError(f"unknown verb: {verb!r}")

    step_count = state.step_count + 1
    if status == "ongoing" and step_count >= spec.max_steps:
        status = "lost"
        feedback = (feedback or []) + [_say("timeout")]

    frozen_facts = frozenset(facts)
    frozen_visited = frozenset(visited)
    new_state = replace(
        state,
        facts=frozen_facts,
        seen=_update_seen(state.seen, frozen_facts, spec, frozen_visited, recipe_known),
        visited=frozen_visited,
        recipe_known=recipe_known,
        rewarded=frozenset(rewarded),
        score=state.score + reward,
        step_count=step_count,
        status=status,
    )
    obs = _observation(new_state, feedback)
    done = status != "ongoing"
    return new_state, obs, reward, done, admissible_actions(new_state)


def ground_truth_full(state: GameState, vocab: Optional[Vocab] = None) -> DiscreteGraph:
    """All facts of the current state"""
    return DiscreteGraph.from_names(vocab or Vocab(), state.facts)


def ground_truth_seen(state: GameState, vocab: Optional[Vocab] = None) -> DiscreteGraph:
    """Facts the player has witnessed so far"""
    return DiscreteGraph.from_names(vocab or Vocab(), state.seen)


# ---------------------------------------------------------------------------
# Planning


def _path(spec: GameSpec, start: str, goal: str) -> List[Tuple[str, str, Optional[str]]]:
    """Shortest list of (direction, room, door) hops from start to goal"""
    queue = deque([start])
    parent: Dict[str, Tuple[str, Tuple[str, str, Optional[str]]]] = {}
    visited = {start}
    while queue:
        room = queue.popleft()
        if room == goal:
            break
        for direction, neighbor, door in _exits_from(spec, room):
            if neighbor not in visited:
                visited.add(neighbor)
                parent[neighbor] = (room, (direction, neighbor, door))
                queue.append(neighbor)
    hops = []
    room = goal
    while room != start:
        prev, hop = parent[room]
        hops.append(hop)
        room = prev
    return list(reversed(hops))


class _Planner:
    """Drives the engine along a winning plan from an arbitrary state"""

    def __init__(self, state: GameState):
        self.state = state
        self.actions: List[ActionCandidate] = []

    def do(self, text: str) -> None:
        action = ActionCandidate.parse(text)
        self.state, _, _, _, _ = step(self.state, action)
        self.actions.append(action)

    def goto(self, goal: str) -> None:
        for direction, _, door in _path(self.state.spec, self.state.player_location, goal):
            if door and not _is_open(self.state.facts, door):
                self.do(f"open {door}")
            self.do(f"go {direction}")

    def fetch(self, item: str) -> None:
        self.goto(_room_of(self.state.facts, item))
        holder, _ = _location(self.state.facts, item)
        if holder in CONTAINERS and not _is_open(self.state.facts, holder):
            self.do(f"open {holder}")
        self.do(f"take {item}")

    def distance(self, item: str) -> int:
        return len(_path(self.state.spec, self.state.player_location, _room_of(self.state.facts, item)))

    def run(self) -> List[ActionCandidate]:
        spec = self.state.spec
        if not self.state.recipe_known and self.state.player_location == "kitchen":
            self.do("examine cookbook")
        if "meal" not in self.state.inventory and self.state.status == "ongoing":
            needs_cut = [i for i in spec.recipe if i.cut_state != UNCUT
                         and i.cut_state not in _states(self.state.facts, i.ingredient)]
            targets = [i.ingredient for i in spec.recipe]
            if needs_cut:
                targets.append("knife")
            pending = [t for t in targets if t not in self.state.inventory]
            while pending:
                nearest = min(pending, key=lambda t: (self.distance(t), t))
                self.fetch(nearest)
                pending.remove(nearest)
            for item in needs_cut:
                self.do(f"{CUT_VERBS[item.cut_state]} {item.ingredient} with knife")
            cooking: Dict[str, List[RecipeItem]] = {}
            for item in spec.recipe:
                if item.cook_state != RAW and item.cook_state not in _states(self.state.facts, item.ingredient):
                    cooking.setdefault(COOK_TOOLS[item.cook_state], []).append(item)
            for tool in sorted(cooking, key=lambda t: (FURNITURE_HOME[t] == "kitchen", t)):
                self.goto(FURNITURE_HOME[tool])
                for item in cooking[tool]:
                    self.do(f"{COOK_VERBS[item.cook_state]} {item.ingredient} with {tool}")
            self.goto("kitchen")
            if not self.state.recipe_known:
                self.do("examine cookbook")
            self.do("prepare meal")
        self.do("eat meal")
        return self.actions


def plan_from(state: GameState) -> List[ActionCandidate]:
    """Winning action sequence from a state (ingredients must still be intact)"""
    planner = _Planner(replace(state, spec=replace(state.spec, max_steps=10 ** 6)))
    return planner.run()


def walkthrough(spec: GameSpec) -> List[ActionCandidate]:
    """Winning action sequence from the start of a game"""
    state, _, _ = reset(spec)
    return plan_from(state)


# ---------------------------------------------------------------------------
# Corpus collection


def _is_safe_detour(state: GameState, action: ActionCandidate) -> bool:
    """A detour must keep the game winnable"""
    new_state, _, _, done, _ = step(state, action)
    if done:
        return False
    verb = action.tokens[0]
    if verb in CUT_VERBS.values() or verb in COOK_VERBS.values():
        return False
    return verb not in ("prepare", "eat")


def collect_transitions(specs: Sequence[GameSpec], off_path_rate: float, seed: int,
                        vocab: Optional[Vocab] = None) -> List[TransitionRecord]:
    """Play walkthroughs (with random detours) and record every transition

    Args:
        specs: Games to play
        off_path_rate: Per-step probability of inserting a random detour
        seed: Seed of the detour sampler
        vocab: Vocabulary of the graph snapshots

    Returns:
        Records in episode order
    """
    if not 0.0 <= off_path_rate <= 1.0:
        raise DomainError(f"off_path_rate must be in [0, 1], got {off_path_rate}")
    vocab = vocab or Vocab()
    rng = random.Random(f"collect:{seed}")
    records: List[TransitionRecord] = []
    for spec in specs:
        state, obs, candidates = reset(spec)
        plan = walkthrough(spec)
        t = 0
        while state.status == "ongoing" and plan:
            action = plan[0]
            if off_path_rate and rng.random() < off_path_rate:
                detours = [c for c in candidates if c != action and _is_safe_detour(state, c)]
                if detours:
                    action = rng.choice(detours)
            new_state, new_obs, reward, done, new_candidates = step(state, action)
            records.append(TransitionRecord(
                game_id=spec.game_id,
                t=t,
                obs_prev=obs,
                action=action.tokens,
                obs=new_obs,
                gseen_prev=ground_truth_seen(state, vocab),
                gseen=ground_truth_seen(new_state, vocab),
                gfull=ground_truth_full(new_state, vocab),
                done=done,
                gfull_prev=ground_truth_full(state, vocab),
                candidates=tuple(c.tokens for c in candidates),
                reward=reward,
            ))
            if action == plan[0]:
                plan = plan[1:]
            elif not done:
                plan = plan_from(new_state)
            state, obs, candidates = new_state, new_obs, new_candidates
            t += 1
    logger.info("collected %d transitions from %d games", len(records), len(specs))
    return records


def entity_kind(name: str) -> str:
    """Coarse type of an entity, used to define plausible node pairs"""
    if name in ROOMS:
        return "room"
    if name in DOORS:
        return "door"
    if name in FURNITURE:
        return "container" if name in CONTAINERS else "support"
    if name in INGREDIENTS:
        return "ingredient"
    if name in STATE_WORDS:
        return "state"
    return name


def engine_words(vocab: Optional[Vocab] = None) -> Set[str]:
    """Every token the engine can emit in observations and commands"""
    vocab = vocab or Vocab()
    words: Set[str] = set(SPECIAL_TOKENS) | set(EXTRA_WORDS)
    for template in TEMPLATES.values():
        words.update(tokenize(re.sub(r"\{\w+\}", " ", template)))
    for sentence in ROOM_FLAVOR:
        words.update(tokenize(sentence))
    for name in vocab.entities:
        words.update(tokenize(name))
    for relation in vocab.relations:
        words.add(relation)
        words.update(relation.split("_"))
    words.update(DIRECTIONS)
    words.update(CUT_VERBS.values())
    words.update(COOK_VERBS.values())
    words.update((UNCUT, RAW))
    return words


def build_word_vocab(vocab: Optional[Vocab] = None) -> WordVocab:
    return WordVocab(engine_words(vocab))


def spec_digest(spec: GameSpec) -> str:
    """Content hash of a spec"""
    return hashlib.sha1(repr(spec.to_dict()).encode("utf-8")).hexdigest()
