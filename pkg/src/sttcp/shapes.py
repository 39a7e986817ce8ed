"""The server's session types, written in the notation of :mod:`sttcp.dsl`.

Case order inside every offer is significant: the drivers' pickers return
indices into it.
"""

from __future__ import annotations

from .dsl import compose, compose_module
from .session import Shape

SERVER_SYSTEM_TEXT = """
pub type ServerSystemSessionType = St![
    (RoleServerUser & Open).
    (RoleServerUser + TcbCreated).
    (RoleClientSystem & Syn).
    (RoleClientSystem + SynAck).
    ServerSystemSynRcvd
];

Rec!(pub ServerSystemSynRcvd, [
    (RoleClientSystem & {
        Ack. // acceptable
            (RoleServerUser + Connected).
            ServerSystemCommLoop,
        Ack. // anything else
            (RoleClientSystem + {
                Ack.ServerSystemSynRcvd, Rst.(RoleServerUser + Close).end
            })
    })
]);

Rec!(pub ServerSystemCommLoop, [
    (RoleClientSystem & {
        Ack. // acceptable, carries data
            (RoleClientSystem + Ack).
            (RoleServerUser + Data).
            (RoleServerUser & {
                Data.
                    (RoleClientSystem + Ack).
                    ServerSystemCommLoop,
                Close.
                    (RoleClientSystem + FinAck).
                    ServerSystemFinWait1
            }),
        Ack. // acceptable, no data
            ServerSystemCommLoop,
        FinAck.
            (RoleClientSystem + Ack).
            (RoleServerUser + Close).
            ServerSystemCloseWait,
        Ack. // unacceptable
            (RoleClientSystem + Ack).
            ServerSystemCommLoop,
        Timeout.
            (RoleClientSystem + Ack).
            ServerSystemCommLoop
    })
]);

Rec!(pub ServerSystemCloseWait, [
    (RoleServerUser & {
        Data.
            (RoleClientSystem + Ack).
            (RoleClientSystem & Ack).
            ServerSystemCloseWait,
        Close.
            (RoleClientSystem + FinAck).
            (RoleClientSystem & Ack).
            end
    })
]);

pub type ServerSystemFinWait1 = St![
    (RoleClientSystem & {
        Ack. // ACK of our FIN
            ServerSystemFinWait2,
        FinAck. // their FIN together with the ACK of ours
            (RoleClientSystem + Ack).
            end
    })
];

Rec!(pub ServerSystemFinWait2, [
    (RoleClientSystem & {
        FinAck.
            (RoleClientSystem + Ack).
            end,
        Ack. // acceptable, nothing to do
            ServerSystemFinWait2,
        Ack. // unacceptable
            (RoleClientSystem + Ack).
            ServerSystemFinWait2
    })
]);
"""

SERVER_USER_TEXT = """
pub type ServerUserSessionType = St![
    (RoleServerSystem + Open).
    (RoleServerSystem & TcbCreated).
    (RoleServerSystem & {
        Connected.ServerUserCommLoop,
        Close.end
    })
];

Rec!(pub ServerUserCommLoop, [
    (RoleServerSystem & {
        Data.
            (RoleServerSystem + {
                Data.ServerUserCommLoop,
                Close.end
            }),
        Close.ServerUserCloseWait
    })
]);

Rec!(pub ServerUserCloseWait, [
    (RoleServerSystem + {
        Data.ServerUserCloseWait,
        Close.end
    })
]);
"""

# Case indices of the system offers.
SYNRCVD_ACCEPTABLE, SYNRCVD_OTHER = 0, 1
SYNRCVD_CHALLENGE, SYNRCVD_RESET = 0, 1
COMM_DATA, COMM_EMPTY, COMM_FIN, COMM_UNACCEPTABLE, COMM_TIMEOUT = range(5)
USER_REPLY_DATA, USER_REPLY_CLOSE = 0, 1
FINWAIT1_ACK, FINWAIT1_FINACK = 0, 1
FINWAIT2_FIN, FINWAIT2_IGNORED, FINWAIT2_UNACCEPTABLE = range(3)

SYSTEM_NAMES = ("ServerSystemSessionType", "ServerSystemSynRcvd", "ServerSystemCommLoop",
                "ServerSystemCloseWait", "ServerSystemFinWait1", "ServerSystemFinWait2")


def system_shapes() -> dict[str, Shape]:
    """Fresh copies of the six server-system types."""
    return compose_module(SERVER_SYSTEM_TEXT)


def user_shapes() -> dict[str, Shape]:
    return compose_module(SERVER_USER_TEXT)


def server_system() -> Shape:
    return system_shapes()["ServerSystemSessionType"]


def server_user() -> Shape:
    return user_shapes()["ServerUserSessionType"]


PING_PONG_TEXT = {
    "a": "(B + Ping).(B & Pong).end",
    "b": "(A & Ping).(A + Pong).end",
}


def ping_pong() -> tuple[Shape, Shape]:
    """The two sides of a one-round ping-pong between roles A and B."""
    from .messages import env
    from .session import Role
    names = env()
    names.update(A=Role("A"), B=Role("B"))
    return compose(PING_PONG_TEXT["a"], names), compose(PING_PONG_TEXT["b"], names)
