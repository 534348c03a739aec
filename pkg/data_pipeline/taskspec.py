"""Tasks, their categories and diagnostic terms, and the word vocabulary built from them."""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

from core.constants import BOS_ID, BOS_TOKEN, EOS_ID, EOS_TOKEN
from core.exceptions import ConfigError, VocabularyError


class Vocabulary:
    """<BOS> and <EOS> first, then every word in order of first appearance."""

    def __init__(self, words: Iterable[str]):
        self._words: List[str] = [BOS_TOKEN, EOS_TOKEN]
        self._ids: Dict[str, int] = {BOS_TOKEN: BOS_ID, EOS_TOKEN: EOS_ID}
        for word in words:
            if word not in self._ids:
                self._ids[word] = len(self._words)
                self._words.append(word)

    @property
    def size(self) -> int:
        return len(self._words)

    @property
    def words(self) -> Tuple[str, ...]:
        return tuple(self._words)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} is not in the vocabulary") from None

    def word_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._words):
            raise VocabularyError(f"token id {token_id} is outside the vocabulary of {self.size}")
        return self._words[token_id]

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.id_of(w) for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.word_of(int(i)) for i in ids]


@dataclass(frozen=True)
class Category:
    name: str
    term: str

    @property
    def words(self) -> Tuple[str, ...]:
        return tuple(self.term.split())


@dataclass(frozen=True)
class Task:
    name: str
    categories: Tuple[Category, ...]

    @property
    def terms(self) -> Tuple[str, ...]:
        return tuple(c.term for c in self.categories)


class TaskSpec:
    def __init__(self, tasks: Sequence[Task]):
        self.tasks: Tuple[Task, ...] = tuple(tasks)
        self._validate()
        self.vocabulary = Vocabulary(w for task in self.tasks for c in task.categories for w in c.words)
        self._offsets = []
        offset = 0
        for task in self.tasks:
            self._offsets.append(offset)
            offset += len(task.categories)

    def _validate(self) -> None:
        if not self.tasks:
            raise ConfigError("a task spec needs at least one task")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"task names repeat: {names}")
        for task in self.tasks:
            if not task.categories:
                raise ConfigError(f"task {task.name!r} has no categories")
            cat_names = [c.name for c in task.categories]
            if len(set(cat_names)) != len(cat_names):
                raise ConfigError(f"task {task.name!r} repeats a category name: {cat_names}")
            for c in task.categories:
                if not c.words:
                    raise ConfigError(f"category {task.name}/{c.name} has an empty term")
                if any(w in (BOS_TOKEN, EOS_TOKEN) for w in c.words):
                    raise ConfigError(f"category {task.name}/{c.name} uses a reserved token")
            for a in task.categories:
                for b in task.categories:
                    if a is not b and b.words[: len(a.words)] == a.words:
                        raise ConfigError(
                            f"in task {task.name!r} the term {a.term!r} is a prefix of {b.term!r}"
                        )

    @property
    def task_count(self) -> int:
        return len(self.tasks)

    @property
    def category_count(self) -> int:
        return sum(len(t.categories) for t in self.tasks)

    @property
    def task_names(self) -> Tuple[str, ...]:
        return tuple(t.name for t in self.tasks)

    def task_index(self, name: str) -> int:
        try:
            return self.task_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown task {name!r}; known tasks are {self.task_names}") from None

    def terms(self, t: int) -> Tuple[str, ...]:
        return self.tasks[t].terms

    def category_index(self, t: int, term: str) -> int:
        """Index of ``term`` among task ``t``'s categories."""
        try:
            return self.tasks[t].terms.index(term)
        except ValueError:
            raise VocabularyError(f"{term!r} is not a category of task {self.tasks[t].name!r}") from None

    def global_category(self, t: int, term: str) -> int:
        """Index of ``term`` in the concatenation of every task's categories."""
        return self._offsets[t] + self.category_index(t, term)

    def category_from_global(self, index: int) -> Tuple[int, str]:
        for t, task in enumerate(self.tasks):
            start = self._offsets[t]
            if start <= index < start + len(task.categories):
                return t, task.categories[index - start].term
        raise VocabularyError(f"global category {index} is outside [0, {self.category_count})")

    def tokenize(self, term: str) -> List[int]:
        return self.vocabulary.encode(term.split())

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocabulary.decode(ids))

    def target_ids(self, term: str) -> List[int]:
        ids = self.tokenize(term)
        if not ids:
            raise VocabularyError("an empty term cannot be a training label")
        return [BOS_ID] + ids + [EOS_ID]

    def merged(self, name: str = "joint") -> "TaskSpec":
        """One task holding every category; categories keep ``task/category`` names."""
        categories = []
        seen = set()
        for task in self.tasks:
            for c in task.categories:
                if c.term not in seen:
                    seen.add(c.term)
                    categories.append(Category(f"{task.name}/{c.name}", c.term))
        return TaskSpec([Task(name, tuple(categories))])

    def single(self, t: int) -> "TaskSpec":
        return TaskSpec([self.tasks[t]])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tasks": [
                {"name": t.name, "categories": [{"name": c.name, "term": c.term} for c in t.categories]}
                for t in self.tasks
            ]
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskSpec":
        try:
            return cls([
                Task(t["name"], tuple(Category(c["name"], c["term"]) for c in t["categories"]))
                for t in data["tasks"]
            ])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed task spec: {exc}") from exc

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TaskSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TaskSpec) and self.tasks == other.tasks

    def __hash__(self) -> int:
        return hash(self.tasks)


DEFAULT_TASKS = {
    "camelyon16": [("normal", "normal tissue"), ("tumor", "metastatic tumor")],
    "brca": [("idc", "invasive ductal carcinoma"), ("ilc", "invasive lobular carcinoma")],
    "esca": [("adeno", "adenocarcinoma"), ("squamous", "squamous cell carcinoma")],
    "nsclc": [("luad", "lung adenocarcinoma"), ("lusc", "lung squamous cell carcinoma")],
    "rcc": [
        ("ccrcc", "clear cell renal carcinoma"),
        ("prcc", "papillary renal carcinoma"),
        ("chrcc", "chromophobe renal carcinoma"),
    ],
}


def default_task_spec() -> TaskSpec:
    """Five tasks, eleven categories, eighteen vocabulary entries."""
    return TaskSpec([
        Task(name, tuple(Category(cat, term) for cat, term in categories))
        for name, categories in DEFAULT_TASKS.items()
    ])
