"""Turing machines over a packed two-counter tape encoding.

A machine has states 1..m (state m halts and is never left), tape alphabet
0..b-1 with 0 the blank, and a total rule table on (state < m, symbol).
Configurations are triples (w1, w2, q) of exact integers: w2 holds the tape
from the head rightward in base b (head symbol = w2 mod b), w1 holds the
half to the left of the head with the cell adjacent to the head in its
lowest digit.  All arithmetic is arbitrary precision; this module is the
halting oracle the rest of the package is validated against.
"""

import json
from dataclasses import dataclass

from .errors import InvalidState, MachineFormatError

__all__ = [
    "Rule",
    "TuringMachine",
    "encode_input",
    "step",
    "run",
    "HaltReport",
    "load_machine",
    "dump_machine",
    "machine_erase",
    "machine_loop",
    "machine_inc",
    "BUNDLED_MACHINES",
]

MOVES = ("S", "R", "L")


@dataclass(frozen=True)
class Rule:
    write: int
    move: str
    next: int


class TuringMachine:
    """Validated rule table; immutable after construction.

    rules maps (state, symbol) -> Rule for every state in 1..m-1 and every
    symbol in 0..b-1.
    """

    __slots__ = ("m", "b", "rules", "name")

    def __init__(self, m, b, rules, name=""):
        if not isinstance(m, int) or m < 2:
            raise MachineFormatError(f"need at least 2 states, got m={m!r}")
        if not isinstance(b, int) or b < 2:
            raise MachineFormatError(f"need alphabet size >= 2, got b={b!r}")
        table = {}
        for key, rule in rules.items():
            q, a = key
            if not (1 <= q < m):
                raise MachineFormatError(f"rule for state {q} outside 1..{m - 1}")
            if not (0 <= a < b):
                raise MachineFormatError(f"rule for symbol {a} outside 0..{b - 1}")
            if not (0 <= rule.write < b):
                raise MachineFormatError(
                    f"rule ({q},{a}) writes {rule.write}, outside 0..{b - 1}")
            if rule.move not in MOVES:
                raise MachineFormatError(
                    f"rule ({q},{a}) has move {rule.move!r}, not one of S/R/L")
            if not (1 <= rule.next <= m):
                raise MachineFormatError(
                    f"rule ({q},{a}) goes to state {rule.next}, outside 1..{m}")
            if key in table:
                raise MachineFormatError(f"duplicate rule for ({q},{a})")
            table[key] = rule
        missing = [(q, a) for q in range(1, m) for a in range(b)
                   if (q, a) not in table]
        if missing:
            raise MachineFormatError(
                f"rule table not total; first missing (state,symbol): {missing[0]}")
        self.m = m
        self.b = b
        self.rules = dict(table)
        self.name = name

    def to_arrays(self):
        """Rule table as flat int arrays indexed (q-1)*b + a; moves coded
        S=0, R=1, L=2.  This is the layout the numeric kernels consume."""
        n = (self.m - 1) * self.b
        write = [0] * n
        move = [0] * n
        nxt = [0] * n
        for (q, a), rule in self.rules.items():
            i = (q - 1) * self.b + a
            write[i] = rule.write
            move[i] = MOVES.index(rule.move)
            nxt[i] = rule.next
        return write, move, nxt

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<TuringMachine{tag} m={self.m} b={self.b}>"


def encode_input(M, w):
    """Initial configuration (0, w, 1) for input w."""
    if w < 0:
        raise MachineFormatError(f"input must be a natural number, got {w}")
    return (0, int(w), 1)


def step(M, config):
    """One exact transition; the halting state is a fixed point."""
    w1, w2, q = config
    if not (1 <= q <= M.m):
        raise InvalidState(f"state {q} outside 1..{M.m}")
    if q == M.m:
        return config
    b = M.b
    a = w2 % b
    rule = M.rules[(q, a)]
    if rule.move == "S":
        w2 = w2 - a + rule.write
    elif rule.move == "R":
        w1 = b * w1 + rule.write
        w2 = (w2 - a) // b
    else:
        w2 = b * (w2 - a + rule.write) + (w1 % b)
        w1 = w1 // b
    return (w1, w2, rule.next)


@dataclass(frozen=True)
class HaltReport:
    halted: bool
    steps_used: int
    final: tuple

    @property
    def clean(self):
        """True when the machine halted on the empty-tape configuration."""
        return self.halted and self.final[0] == 0 and self.final[1] == 0


def run(M, w, max_steps):
    """Iterate step from (0,w,1); report first arrival at state m."""
    config = encode_input(M, w)
    for j in range(max_steps + 1):
        if config[2] == M.m:
            return HaltReport(True, j, config)
        if j == max_steps:
            break
        config = step(M, config)
    return HaltReport(False, max_steps, config)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def load_machine(source):
    """Build a machine from a JSON dict, JSON string, or file path.

    Format: {"m": int, "b": int, "rules": [{"q", "a", "write", "move",
    "next"}, ...]}.  Errors carry the offending rule index.
    """
    if isinstance(source, dict):
        doc = source
    elif isinstance(source, str) and source.lstrip().startswith("{"):
        doc = json.loads(source)
    else:
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    for key in ("m", "b", "rules"):
        if key not in doc:
            raise MachineFormatError(f"missing top-level field {key!r}")
    try:
        m, b = int(doc["m"]), int(doc["b"])
    except (TypeError, ValueError) as exc:
        raise MachineFormatError(f"bad m/b: {exc}") from exc
    rules = {}
    seen = set()
    for i, entry in enumerate(doc["rules"]):
        try:
            q, a = int(entry["q"]), int(entry["a"])
            rule = Rule(int(entry["write"]), str(entry["move"]), int(entry["next"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MachineFormatError(f"malformed rule: {exc}", line=i) from exc
        if (q, a) in seen:
            raise MachineFormatError(f"duplicate rule for ({q},{a})", line=i)
        if not 1 <= q < m:
            raise MachineFormatError(f"rule state {q} outside 1..{m - 1}", line=i)
        if not 0 <= a < b:
            raise MachineFormatError(f"rule symbol {a} outside 0..{b - 1}", line=i)
        if not 0 <= rule.write < b:
            raise MachineFormatError(
                f"rule ({q},{a}) writes {rule.write}, outside 0..{b - 1}", line=i)
        if rule.move not in ("S", "R", "L"):
            raise MachineFormatError(f"rule ({q},{a}) move {rule.move!r}", line=i)
        if not 1 <= rule.next <= m:
            raise MachineFormatError(
                f"rule ({q},{a}) next state {rule.next} outside 1..{m}", line=i)
        seen.add((q, a))
        rules[(q, a)] = rule
    return TuringMachine(m, b, rules, name=str(doc.get("name", "")))


def dump_machine(M):
    """Inverse of load_machine, as a JSON-ready dict."""
    rules = [dict(q=q, a=a, write=r.write, move=r.move, next=r.next)
             for (q, a), r in sorted(M.rules.items())]
    doc = dict(m=M.m, b=M.b, rules=rules)
    if M.name:
        doc["name"] = M.name
    return doc


# ---------------------------------------------------------------------------
# bundled machines
# ---------------------------------------------------------------------------

def machine_erase():
    """Erase the tape rightward, halt on blank; halts cleanly on every input.

    b = 10, m = 2.  State 1 on a nonzero symbol writes 0 and moves right
    (writing blanks into w1, which therefore stays 0); on blank it halts.
    """
    rules = {(1, 0): Rule(0, "S", 2)}
    for a in range(1, 10):
        rules[(1, a)] = Rule(0, "R", 1)
    return TuringMachine(2, 10, rules, name="erase")


def machine_loop():
    """Scan right forever writing blanks; never reaches the halting state.

    Writing the blank keeps the left word at 0, so the configuration stays
    bounded (it parks at (0,0,1)) even though the head runs off to the
    right.  A variant writing the scanned symbol back would grow the left
    word by a factor b per step and escape any bounded region.
    """
    rules = {(1, a): Rule(0, "R", 1) for a in range(3)}
    return TuringMachine(2, 3, rules, name="loop")


def machine_inc():
    """Binary increment with digits 1/2 encoding bits 0/1 (LSB at head),
    then erase the tape and halt.  Exercises all three head moves.

    b = 3, m = 4.  State 1 propagates the carry, state 2 skips to the right
    end of the numeral, state 3 erases leftward until the blank.
    """
    rules = {
        # carry: bit1 -> bit0 and keep carrying; bit0 or blank -> bit1, done
        (1, 2): Rule(1, "R", 1),
        (1, 1): Rule(2, "R", 2),
        (1, 0): Rule(2, "R", 2),
        # seek the right end of the numeral
        (2, 1): Rule(1, "R", 2),
        (2, 2): Rule(2, "R", 2),
        (2, 0): Rule(0, "L", 3),
        # erase back toward the blank left of the numeral
        (3, 1): Rule(0, "L", 3),
        (3, 2): Rule(0, "L", 3),
        (3, 0): Rule(0, "S", 4),
    }
    return TuringMachine(4, 3, rules, name="inc")


def encode_binary_input(w):
    """Value of w as the inc machine's tape numeral: bits LSB-first, bit 0
    stored as digit 1 and bit 1 as digit 2, packed base 3."""
    digits = []
    if w == 0:
        digits = [1]
    while w > 0:
        digits.append(1 + (w & 1))
        w >>= 1
    out = 0
    for d in reversed(digits):
        out = 3 * out + d
    return out


BUNDLED_MACHINES = {
    "erase": machine_erase,
    "loop": machine_loop,
    "inc": machine_inc,
}
