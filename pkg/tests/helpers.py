"""Shared fixtures for protocol tests."""

from myzone import ca as ca_mod
from myzone import crypto
from myzone.rendezvous import NatKind, RegistrationRecord, RendezvousServer, open_session


class Pki:
    def __init__(self, scheme=crypto.TOY):
        self.scheme = scheme
        self.ca = ca_mod.CertificateAuthority.from_seed("ca", 1000, scheme)
        self.keys = {}
        self.certs = {}

    def user(self, name, seed=None):
        if name not in self.keys:
            kp = self.scheme.keypair(seed if seed is not None else 1 + len(self.keys))
            self.keys[name] = kp
            self.certs[name] = ca_mod.obtain_certificate(self.ca, kp, name)
        return self.keys[name], self.certs[name]

    def rendezvous(self, name="rv", seed=500, config=None):
        return RendezvousServer(name, self.scheme.keypair(seed), self.ca.public_key, config, self.scheme,
                                cert_exists=self.ca.has_certificate)

    def record(self, name, priority=0, passphrases=(), mirrors=(), port=7000, ip="198.51.7.1",
               nat_kind=NatKind.PUBLIC_IP, **kw):
        kp, _ = self.user(name)
        rec = RegistrationRecord(name, priority, ip, port, nat_kind, passphrases=tuple(passphrases),
                                 mirrors=tuple(mirrors), **kw)
        return rec.signed(kp.private_key, self.scheme)

    def session(self, server, name):
        kp, cert = self.user(name)
        return open_session(kp, server, cert)


def social_world(names, nat=None, relays=1, seed=3, settings=None):
    """Deployment with mutually befriended users, one engine per primary device."""
    from myzone.netsim import NatType
    from myzone.peer import Deployment
    from myzone.replication import ReplicaEngine

    d = Deployment(seed=seed)
    d.add_rendezvous("rv", primary=True)
    for i in range(relays):
        d.add_relay(f"relay{i}")
    devs = {n: d.add_device(n, nat=nat or NatType.PUBLIC) for n in names}
    for dev in devs.values():
        dev.obtain_certificate()
    ids = [d.identity(n) for n in names]
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            a.befriend(b)
    engines = {n: ReplicaEngine(devs[n], settings) for n in names}
    for dev in devs.values():
        dev.bootstrap()
    return d, devs, engines
