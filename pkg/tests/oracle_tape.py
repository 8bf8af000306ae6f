"""Independent tape-based Turing machine simulator used as a test oracle.

Works on an explicit cell dict instead of the integer-pair encoding, so it
shares no code path with basin_forge.tm_core.
"""


def digits_of(n, b):
    out = []
    while n:
        out.append(n % b)
        n //= b
    return out


class Tape:
    def __init__(self, w, b):
        self.b = b
        self.cells = {}
        for i, d in enumerate(digits_of(w, b)):
            if d:
                self.cells[i] = d
        self.head = 0

    def read(self):
        return self.cells.get(self.head, 0)

    def write(self, a):
        if a:
            self.cells[self.head] = a
        else:
            self.cells.pop(self.head, None)

    def config(self):
        # (w1, w2) per the two-sided integer encoding: w2 collects the head
        # cell and everything right of it, w1 everything left with the cell
        # adjacent to the head least significant.
        w1 = 0
        w2 = 0
        for i, d in self.cells.items():
            if i >= self.head:
                w2 += d * self.b ** (i - self.head)
            else:
                w1 += d * self.b ** (self.head - 1 - i)
        return w1, w2


def run_tape(machine, w, max_steps):
    """Simulate machine (a tm_core.TuringMachine) on input w.

    Returns (halted, steps_used, (w1, w2, q)).
    """
    tape = Tape(w, machine.b)
    q = 1
    for step in range(1, max_steps + 1):
        a = tape.read()
        rule = machine.rules[(q, a)]
        tape.write(rule.write)
        if rule.move == "R":
            tape.head += 1
        elif rule.move == "L":
            tape.head -= 1
        q = rule.next
        if q == machine.m:
            w1, w2 = tape.config()
            return True, step, (w1, w2, q)
    w1, w2 = tape.config()
    return False, max_steps, (w1, w2, q)


def step_tape(machine, config):
    """One exact step from an arbitrary (w1, w2, q) configuration."""
    w1, w2, q = config
    b = machine.b
    tape = Tape(0, b)
    for i, d in enumerate(digits_of(w2, b)):
        if d:
            tape.cells[i] = d
    for i, d in enumerate(digits_of(w1, b)):
        if d:
            tape.cells[-1 - i] = d
    if q == machine.m:
        return config
    a = tape.read()
    rule = machine.rules[(q, a)]
    tape.write(rule.write)
    if rule.move == "R":
        tape.head += 1
    elif rule.move == "L":
        tape.head -= 1
    nw1, nw2 = tape.config()
    return nw1, nw2, rule.next
