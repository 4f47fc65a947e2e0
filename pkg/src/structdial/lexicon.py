"""Closed word classes for the synthetic dialogue grammar.

The SVO matcher and the corpus generator share these sets, so a sentence the
generator emits is always recognisable by the matcher.
"""

from __future__ import annotations

from dataclasses import dataclass

ORDINALS = (
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
    "ninth", "tenth", "eleventh", "twelfth", "thirteenth", "fourteenth",
    "fifteenth", "sixteenth", "seventeenth", "eighteenth", "nineteenth", "twentieth",
)

_TOPIC_WORDS = (
    ("kernel", "module", "driver", "boot", "grub", "initrd", "firmware", "panic"),
    ("wifi", "router", "ethernet", "dhcp", "subnet", "gateway", "ping", "dns"),
    ("printer", "cups", "toner", "spooler", "duplex", "scanner", "paper", "tray"),
    ("python", "pip", "virtualenv", "wheel", "import", "traceback", "interpreter", "venv"),
    ("nvidia", "gpu", "xorg", "monitor", "resolution", "compositor", "vsync", "refresh"),
    ("apt", "repository", "ppa", "dpkg", "upgrade", "mirror", "keyring", "changelog"),
    ("ssh", "keypair", "sshd", "port", "firewall", "ufw", "tunnel", "fingerprint"),
    ("disk", "partition", "fstab", "mount", "ext4", "swap", "gparted", "uuid"),
    ("sound", "pulseaudio", "alsa", "speaker", "headphones", "volume", "mixer", "codec"),
    ("browser", "firefox", "chromium", "cookie", "cache", "tab", "extension", "bookmark"),
    ("docker", "container", "image", "volume_mount", "compose", "registry", "daemon", "layer"),
    ("cron", "crontab", "schedule", "job", "systemd", "timer", "unit", "journal"),
    ("user", "password", "sudo", "group", "login", "shadow", "passwd", "session"),
    ("email", "thunderbird", "imap", "smtp", "inbox", "attachment", "spam", "mailbox"),
    ("vim", "emacs", "nano", "buffer", "syntax", "plugin", "keymap", "vimrc"),
    ("backup", "rsync", "snapshot", "tarball", "restore", "archive", "checksum", "dedup"),
    ("bluetooth", "pairing", "dongle", "mouse", "keyboard", "adapter", "bluez", "headset"),
    ("laptop", "battery", "suspend", "hibernate", "lid", "charger", "powertop", "acpi"),
    ("locale", "unicode", "charset", "keyboard_layout", "timezone", "clock", "ntp", "utf8"),
    ("java", "jdk", "classpath", "maven", "jar", "gradle", "jvm", "heap"),
)


@dataclass(frozen=True)
class GrammarLexicon:
    determiners: frozenset[str] = frozenset({"the", "a", "my", "your", "this", "that"})
    subjects: frozenset[str] = frozenset({
        "cat", "dog", "admin", "tech", "friend", "manager", "student", "teacher",
        "robot", "neighbor", "doctor", "farmer", "pilot", "baker", "guard", "clerk",
    })
    verbs: frozenset[str] = frozenset({
        "chased", "fixed", "sold", "found", "built", "painted", "moved", "opened",
        "cleaned", "checked", "dropped", "carried", "watched", "borrowed", "lost", "ordered",
    })
    objects: frozenset[str] = frozenset({
        "dog", "cat", "car", "box", "door", "lamp", "book", "chair", "table",
        "bike", "phone", "cable", "ticket", "window", "bottle", "ladder",
    })
    markers: tuple[str, ...] = ORDINALS
    fillers: tuple[str, ...] = (
        "okay", "yes", "no", "maybe", "really", "just", "also", "still", "please",
        "thanks", "hmm", "right", "well", "sure", "again", "now", "here", "there",
        "today", "later", "quite", "very", "so", "too",
    )
    topics: tuple[tuple[str, ...], ...] = _TOPIC_WORDS
    clause_breaks: frozenset[str] = frozenset({"and", "but", "because"})

    @property
    def nouns(self) -> frozenset[str]:
        return self.subjects | self.objects

    def check(self) -> None:
        from .errors import ConfigError

        if self.verbs & self.nouns:
            raise ConfigError("verbs must be disjoint from nouns")
        if self.determiners & (self.nouns | self.verbs):
            raise ConfigError("determiners must be disjoint from nouns and verbs")
        closed = self.nouns | self.verbs | self.determiners | set(self.markers)
        for topic in self.topics:
            if closed & set(topic):
                raise ConfigError("topic words must not reuse grammar words")
        if closed & set(self.fillers):
            raise ConfigError("fillers must not reuse grammar words")


DEFAULT_LEXICON = GrammarLexicon()
