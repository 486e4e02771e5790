/// Common English words used for the lexicon corpus.
pub const BUILTIN_WORDS: &[&str] = &[
    "the", "and", "that", "have", "for", "not", "with", "you", "this", "but", "his", "from", "they", "say",
    "her", "she", "will", "one", "all", "would", "there", "their", "what", "out", "about", "who", "get",
    "which", "when", "make", "can", "like", "time", "just", "him", "know", "take", "people", "into",
    "year", "your", "good", "some", "could", "them", "see", "other", "than", "then", "now", "look",
    "only", "come", "its", "over", "think", "also", "back", "after", "use", "two", "how", "our", "work",
    "first", "well", "way", "even", "new", "want", "because", "any", "these", "give", "day", "most",
    "thing", "great", "where", "help", "through", "much", "before", "line", "right", "too",
    "mean", "old", "same", "tell", "boy", "follow", "came", "show", "around", "form", "three", "small",
    "set", "put", "end", "does", "another", "large", "must", "big", "such", "turn", "here", "why",
    "ask", "went", "men", "read", "need", "land", "different", "home", "move", "try", "kind", "hand",
    "picture", "again", "change", "off", "play", "spell", "air", "away", "animal", "house", "point",
    "page", "letter", "mother", "answer", "found", "study", "still", "learn", "should", "world", "high",
    "every", "near", "add", "food", "between", "own", "below", "country", "plant", "last", "school",
    "father", "keep", "tree", "never", "start", "city", "earth", "eye", "light", "thought", "head",
    "under", "story", "saw", "left", "few", "while", "along", "might", "close", "something", "seem",
    "next", "hard", "open", "example", "begin", "life", "always", "those", "both", "paper", "together",
    "got", "group", "often", "run", "important", "until", "children", "side", "feet", "car", "mile",
    "night", "walk", "white", "sea", "began", "grow", "took", "river", "four", "carry", "state", "once",
    "book", "hear", "stop", "without", "second", "later", "miss", "idea", "enough", "eat", "face",
    "watch", "far", "really", "almost", "let", "above", "girl", "sometimes", "mountain", "cut", "young",
    "talk", "soon", "list", "song", "being", "leave", "family", "street", "hotel", "coffee", "station",
];
