"""Session-type vocabulary: roles, messages, action shapes and one-shot tokens.

A shape is an immutable tree of actions (offer, select, end) whose cycles
pass through :class:`Rec` indirection nodes. A :class:`Token` witnesses the
next permitted action of a shape and may be consumed exactly once; the
channel operations consume tokens and hand back continuation tokens.
Python has no move-only values, so linearity is enforced at runtime.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, ClassVar, Iterable, Iterator


class SessionError(Exception):
    """Misuse of the session API (wrong token kind, wrong peer, ...)."""


class LinearityError(SessionError):
    """A token was used after it had already been consumed."""


class MalformedShape(SessionError):
    pass


class ProtocolViolation(SessionError):
    """An inbound message does not fit the current session type."""


@dataclass(frozen=True)
class Role:
    name: str

    def __str__(self) -> str:
        return self.name


SERVER_USER = Role("ServerUser")
SERVER_SYSTEM = Role("ServerSystem")
CLIENT_SYSTEM = Role("ClientSystem")


class Message:
    """Base for message classes. ``label`` defaults to the class name."""

    label: ClassVar[str]
    virtual: ClassVar[bool] = False

    def __init_subclass__(cls, **kwargs: Any) -> None:
        super().__init_subclass__(**kwargs)
        if "label" not in cls.__dict__:
            cls.label = cls.__name__

    def encode(self) -> Any:
        raise NotImplementedError

    @classmethod
    def decode(cls, rep: Any) -> "Message":
        raise NotImplementedError


class Subchoice(Message):
    """Marks the right-hand virtual node of an expanded n-ary choice."""

    label = "..."
    virtual = True


# -- shapes -----------------------------------------------------------------

class Shape:
    __slots__ = ()


@dataclass(frozen=True)
class End(Shape):
    def __repr__(self) -> str:
        return "End"


END = End()


@dataclass(frozen=True)
class OfferOne(Shape):
    peer: Role
    msg: type[Message]
    cont: Shape


@dataclass(frozen=True)
class OfferTwo(Shape):
    peer: Role
    msg1: type[Message]
    msg2: type[Message]
    cont1: Shape
    cont2: Shape


@dataclass(frozen=True)
class SelectOne(Shape):
    peer: Role
    msg: type[Message]
    cont: Shape


@dataclass(frozen=True)
class SelectTwo(Shape):
    peer: Role
    msg1: type[Message]
    msg2: type[Message]
    cont1: Shape
    cont2: Shape


class Rec(Shape):
    """Named recursion point. The body is bound once, after construction,
    so that it can refer back to this node."""

    __slots__ = ("name", "_body")

    def __init__(self, name: str, body: Shape | None = None):
        self.name = name
        self._body = body

    @property
    def body(self) -> Shape:
        if self._body is None:
            raise MalformedShape(f"recursive type {self.name} has no body")
        return self._body

    def define(self, body: Shape) -> "Rec":
        if self._body is not None:
            raise MalformedShape(f"recursive type {self.name} already defined")
        self._body = body
        return self

    # Recursion points are compared by name; use shape_equal for a deep check.
    def __eq__(self, other: object) -> bool:
        return isinstance(other, Rec) and other.name == self.name

    def __hash__(self) -> int:
        return hash(("Rec", self.name))

    def __repr__(self) -> str:
        return f"Rec({self.name})"


OFFERS = (OfferOne, OfferTwo)
SELECTS = (SelectOne, SelectTwo)


def branches(shape: OfferTwo | SelectTwo | OfferOne | SelectOne) -> list[tuple[type[Message], Shape]]:
    """Flatten a (possibly expanded n-ary) choice into its ordered cases."""
    if isinstance(shape, (OfferOne, SelectOne)):
        return [(shape.msg, shape.cont)]
    out = [(shape.msg1, shape.cont1)]
    rest = shape.cont2
    if shape.msg2 is Subchoice:
        out.extend(branches(rest))
    else:
        out.append((shape.msg2, rest))
    return out


def _expand(one: type, two: type, peer: Role,
            cases: list[tuple[type[Message], Shape]]) -> Shape:
    if not cases:
        raise MalformedShape("a choice needs at least one branch")
    if len(cases) == 1:
        (msg, cont), = cases
        return one(peer, msg, cont)
    (m1, c1), rest = cases[0], cases[1:]
    if len(rest) == 1:
        (m2, c2), = rest
        return two(peer, m1, m2, c1, c2)
    return two(peer, m1, Subchoice, c1, _expand(one, two, peer, rest))


def expand_nary_offer(peer: Role, cases: Iterable[tuple[type[Message], Shape]]) -> Shape:
    """Left-leaning binary encoding of an n-way offer.

    Each left branch holds one original case; the right branches are
    virtual nodes, except the bottom-most, which holds the last case.
    """
    return _expand(OfferOne, OfferTwo, peer, list(cases))


def expand_nary_select(peer: Role, cases: Iterable[tuple[type[Message], Shape]]) -> Shape:
    return _expand(SelectOne, SelectTwo, peer, list(cases))


def choice_depth(shape: Shape) -> int:
    """Number of binary nodes on the virtual spine of an expanded choice."""
    depth = 0
    while isinstance(shape, (OfferTwo, SelectTwo)):
        depth += 1
        if shape.msg2 is not Subchoice:
            break
        shape = shape.cont2
    return depth


def children(shape: Shape) -> Iterator[Shape]:
    if isinstance(shape, (OfferOne, SelectOne)):
        yield shape.cont
    elif isinstance(shape, (OfferTwo, SelectTwo)):
        yield shape.cont1
        yield shape.cont2
    elif isinstance(shape, Rec):
        yield shape.body


def check_well_formed(shape: Shape) -> None:
    """Raise MalformedShape for undefined or unguarded recursion."""
    seen: set[int] = set()
    stack = [shape]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, Rec):
            chain = {id(node)}
            inner = node.body
            while isinstance(inner, Rec):
                if id(inner) in chain:
                    raise MalformedShape(f"unguarded recursion through {node.name}")
                chain.add(id(inner))
                inner = inner.body
        elif isinstance(node, (OfferOne, SelectOne, OfferTwo, SelectTwo)):
            msgs = [node.msg] if isinstance(node, (OfferOne, SelectOne)) else [node.msg1, node.msg2]
            if not isinstance(node.peer, Role):
                raise MalformedShape(f"peer {node.peer!r} is not a Role")
            for m in msgs:
                if not (isinstance(m, type) and issubclass(m, Message)):
                    raise MalformedShape(f"{m!r} is not a message class")
        elif not isinstance(node, End):
            raise MalformedShape(f"{node!r} is not a shape")
        stack.extend(children(node))


def unroll(shape: Shape) -> Shape:
    while isinstance(shape, Rec):
        shape = shape.body
    return shape


def shape_equal(a: Shape, b: Shape) -> bool:
    """Structural equality, coinductive through recursion points."""
    assumed: set[tuple[int, int]] = set()

    def eq(x: Shape, y: Shape) -> bool:
        if isinstance(x, Rec) or isinstance(y, Rec):
            if not (isinstance(x, Rec) and isinstance(y, Rec)) or x.name != y.name:
                return False
            key = (id(x), id(y))
            if key in assumed:
                return True
            assumed.add(key)
            return eq(x.body, y.body)
        if type(x) is not type(y):
            return False
        if isinstance(x, End):
            return True
        if isinstance(x, (OfferOne, SelectOne)):
            return x.peer == y.peer and x.msg is y.msg and eq(x.cont, y.cont)
        return (x.peer == y.peer and x.msg1 is y.msg1 and x.msg2 is y.msg2
                and eq(x.cont1, y.cont1) and eq(x.cont2, y.cont2))

    return eq(a, b)


# -- tokens -----------------------------------------------------------------

class Token:
    """One-shot witness of ``shape``, the next permitted action."""

    __slots__ = ("shape", "_spent", "_closed")

    def __init__(self, shape: Shape):
        self.shape = shape
        self._spent = False
        self._closed: set[int] = set()

    @property
    def spent(self) -> bool:
        return self._spent

    def consume(self, *kinds: type) -> Shape:
        if self._spent:
            raise LinearityError(f"token for {describe(self.shape)} was already consumed")
        if kinds and not isinstance(self.shape, kinds):
            names = "/".join(k.__name__ for k in kinds)
            raise SessionError(f"expected a {names} token, got {describe(self.shape)}")
        self._spent = True
        return self.shape

    def release(self, endpoint: object) -> None:
        """Consume an End witness for one endpoint.

        The same End witness may close each of a role's endpoints once,
        which is how a role that ends on two channels finishes both.
        """
        if not isinstance(self.shape, End):
            raise SessionError(f"close needs an End token, got {describe(self.shape)}")
        if id(endpoint) in self._closed:
            raise LinearityError("End token already used to close this endpoint")
        self._closed.add(id(endpoint))
        self._spent = True

    def __repr__(self) -> str:
        state = "spent" if self._spent else "live"
        return f"<Token {describe(self.shape)} {state}>"


def new_session(shape: Shape) -> Token:
    check_well_formed(shape)
    return Token(shape)


def rec_enter(token: Token) -> Token:
    rec = token.consume(Rec)
    return Token(rec.body)


def describe(shape: Shape) -> str:
    if isinstance(shape, Rec):
        return f"rec {shape.name}"
    if isinstance(shape, End):
        return "end"
    op = "&" if isinstance(shape, OFFERS) else "+"
    labels = ", ".join(m.label for m, _ in branches(shape))
    return f"({shape.peer} {op} {labels})"


# -- reference interpreter --------------------------------------------------

RECV, SEND = "recv", "send"


def step(positions: list[Shape], peer: Role, direction: str, label: str) -> list[Shape]:
    out: list[Shape] = []
    for pos in positions:
        node = unroll(pos)
        if isinstance(node, End):
            continue
        wanted = OFFERS if direction == RECV else SELECTS
        if not isinstance(node, wanted) or node.peer != peer:
            continue
        for msg, cont in branches(node):
            if msg.label == label and not any(cont is o for o in out):
                out.append(cont)
    return out


def accepts(shape: Shape, trace: Iterable[tuple[Role, str, str]], complete: bool = True) -> bool:
    """Is ``trace`` of (peer, direction, label) a word of ``shape``?

    Branches that share a label are tracked nondeterministically. With
    ``complete`` the word must also end in ``end``; otherwise any prefix
    of a word is accepted.
    """
    positions = [shape]
    for peer, direction, label in trace:
        positions = step(positions, peer, direction, label)
        if not positions:
            return False
    if not complete:
        return True
    return any(isinstance(unroll(p), End) for p in positions)
