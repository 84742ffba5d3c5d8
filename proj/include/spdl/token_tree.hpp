#pragma once

// Draft-token tree and its attention visibility masks.
//
// A tree verification step scores every node in one batched forward. Node i
// may attend to node j exactly when j lies on i's root path (ancestor or
// self), which makes each root-to-node path behave like an ordinary causal
// chain. Two mask forms are provided: a dense boolean matrix and an
// Euler-tour interval form that answers the same query from two ints per
// node.

#include <cstdint>
#include <string>
#include <vector>

#include "spdl/common.hpp"

namespace spdl {

// Per-depth branching plan, e.g. "4-2-2": the root gets 4 children, every
// depth-1 node gets 2, every depth-2 node gets 2.
struct TreeShape {
    std::vector<int> widths;

    static TreeShape parse(const std::string& text) {
        if (text.empty()) {
            throw ArgumentError("tree shape: empty spec");
        }
        TreeShape shape;
        size_t pos = 0;
        while (pos <= text.size()) {
            size_t dash = text.find('-', pos);
            if (dash == std::string::npos) {
                dash = text.size();
            }
            const std::string part = text.substr(pos, dash - pos);
            if (part.empty()) {
                throw ArgumentError("tree shape: empty segment in '" + text + "'");
            }
            int w = 0;
            for (char c : part) {
                if (c < '0' || c > '9') {
                    throw ArgumentError("tree shape: non-numeric segment '" + part + "'");
                }
                w = w * 10 + (c - '0');
            }
            if (w < 1) {
                throw ArgumentError("tree shape: width must be >= 1");
            }
            shape.widths.push_back(w);
            pos = dash + 1;
            if (dash == text.size()) {
                break;
            }
        }
        return shape;
    }

    int depth() const { return (int)widths.size(); }

    // Total node count including the root.
    int node_count() const {
        int total = 1, level = 1;
        for (int w : widths) {
            level *= w;
            total += level;
        }
        return total;
    }

    std::string str() const {
        std::string out;
        for (size_t i = 0; i < widths.size(); ++i) {
            out += std::to_string(widths[i]);
            if (i + 1 < widths.size()) {
                out += "-";
            }
        }
        return out;
    }
};

class TokenTree {
public:
    struct Node {
        int token;
        int parent;  // -1 for root
        int depth;   // root is 0
        std::vector<int> children;
    };

    explicit TokenTree(int capacity) : capacity_(capacity) {
        if (capacity < 1) {
            throw ArgumentError("tree capacity must be >= 1");
        }
        nodes_.reserve((size_t)capacity);
    }

    // The root carries the token every draft path is conditioned on.
    int add_root(int token) {
        if (!nodes_.empty()) {
            throw StructureError("tree already has a root");
        }
        nodes_.push_back({token, -1, 0, {}});
        return 0;
    }

    // Children keep insertion order; a child's index is always greater than
    // its parent's, so index order is a valid topological order.
    int add_child(int parent, int token) {
        if (nodes_.empty()) {
            throw StructureError("add_child before add_root");
        }
        if (parent < 0 || parent >= (int)nodes_.size()) {
            throw StructureError("add_child: parent index out of range");
        }
        if ((int)nodes_.size() >= capacity_) {
            throw CapacityError("tree capacity exceeded");
        }
        const int idx = (int)nodes_.size();
        nodes_.push_back({token, parent, nodes_[(size_t)parent].depth + 1, {}});
        nodes_[(size_t)parent].children.push_back(idx);
        return idx;
    }

    int size() const { return (int)nodes_.size(); }
    int capacity() const { return capacity_; }
    bool empty() const { return nodes_.empty(); }

    const Node& node(int i) const {
        if (i < 0 || i >= size()) {
            throw ArgumentError("tree node index out of range");
        }
        return nodes_[(size_t)i];
    }

    int token(int i) const { return node(i).token; }
    int parent(int i) const { return node(i).parent; }
    int depth(int i) const { return node(i).depth; }

    // True when a is on b's root path (including a == b).
    bool is_ancestor_or_self(int a, int b) const {
        node(a);
        int cur = b;
        while (cur != -1) {
            if (cur == a) {
                return true;
            }
            cur = nodes_[(size_t)cur].parent;
        }
        return false;
    }

    // Node indices from the root down to i, inclusive.
    std::vector<int> path_from_root(int i) const {
        node(i);
        std::vector<int> path;
        for (int cur = i; cur != -1; cur = nodes_[(size_t)cur].parent) {
            path.push_back(cur);
        }
        std::reverse(path.begin(), path.end());
        return path;
    }

    std::vector<int> tokens_from_root(int i) const {
        std::vector<int> toks;
        for (int idx : path_from_root(i)) {
            toks.push_back(nodes_[(size_t)idx].token);
        }
        return toks;
    }

    std::vector<int> leaves() const {
        std::vector<int> out;
        for (int i = 0; i < size(); ++i) {
            if (nodes_[(size_t)i].children.empty()) {
                out.push_back(i);
            }
        }
        return out;
    }

    int max_depth() const {
        int d = 0;
        for (const auto& n : nodes_) {
            d = std::max(d, n.depth);
        }
        return d;
    }

    // Indented dump, one node per line: "index: token (depth d)".
    std::string debug_string() const {
        std::string out;
        if (nodes_.empty()) {
            return "(empty tree)\n";
        }
        dump(0, out);
        return out;
    }

private:
    void dump(int i, std::string& out) const {
        const Node& n = nodes_[(size_t)i];
        out.append((size_t)n.depth * 2, ' ');
        out += std::to_string(i) + ": " + std::to_string(n.token) + " (depth " +
               std::to_string(n.depth) + ")\n";
        for (int c : n.children) {
            dump(c, out);
        }
    }

    std::vector<Node> nodes_;
    int capacity_;
};

// Grows a tree level by level: every node at depth d gets widths[d] children
// with tokens chosen by pick(node_index, child_slot).
template <typename Pick>
TokenTree grow_tree(int root_token, const TreeShape& shape, Pick&& pick) {
    TokenTree tree(shape.node_count());
    tree.add_root(root_token);
    std::vector<int> frontier = {0};
    for (int level = 0; level < shape.depth(); ++level) {
        std::vector<int> next;
        for (int idx : frontier) {
            for (int c = 0; c < shape.widths[(size_t)level]; ++c) {
                next.push_back(tree.add_child(idx, pick(idx, c)));
            }
        }
        frontier = std::move(next);
    }
    return tree;
}

// Dense visibility matrix: row i sees column j iff j is an ancestor of i or
// i itself.
struct TreeMask {
    int n = 0;
    std::vector<uint8_t> bits;  // row-major n*n

    bool visible(int i, int j) const { return bits[(size_t)i * (size_t)n + (size_t)j] != 0; }
};

inline TreeMask build_tree_mask(const TokenTree& tree) {
    TreeMask mask;
    mask.n = tree.size();
    mask.bits.assign((size_t)mask.n * (size_t)mask.n, 0);
    for (int i = 0; i < mask.n; ++i) {
        for (int cur = i; cur != -1; cur = tree.parent(cur)) {
            mask.bits[(size_t)i * (size_t)mask.n + (size_t)cur] = 1;
        }
    }
    return mask;
}

// Euler-tour intervals. enter values are assigned in DFS preorder (children
// in insertion order); exit is one past the subtree's last enter. j is an
// ancestor-or-self of i iff enter[j] <= enter[i] < exit[j].
struct CompressedTreeMask {
    std::vector<int> enter, exit;

    int n() const { return (int)enter.size(); }

    bool visible(int i, int j) const {
        return enter[(size_t)j] <= enter[(size_t)i] && enter[(size_t)i] < exit[(size_t)j];
    }

    TreeMask expand() const {
        TreeMask mask;
        mask.n = n();
        mask.bits.assign((size_t)mask.n * (size_t)mask.n, 0);
        for (int i = 0; i < mask.n; ++i) {
            for (int j = 0; j < mask.n; ++j) {
                mask.bits[(size_t)i * (size_t)mask.n + (size_t)j] = visible(i, j) ? 1 : 0;
            }
        }
        return mask;
    }
};

inline CompressedTreeMask compress_tree_mask(const TokenTree& tree) {
    if (tree.empty()) {
        throw StructureError("cannot compress mask of an empty tree");
    }
    CompressedTreeMask mask;
    const int n = tree.size();
    mask.enter.assign((size_t)n, 0);
    mask.exit.assign((size_t)n, 0);
    int clock = 0;
    // iterative preorder with explicit exit bookkeeping
    struct Frame {
        int node;
        size_t next_child;
    };
    std::vector<Frame> stack = {{0, 0}};
    mask.enter[0] = clock++;
    while (!stack.empty()) {
        Frame& f = stack.back();
        const auto& children = tree.node(f.node).children;
        if (f.next_child < children.size()) {
            const int c = children[f.next_child++];
            mask.enter[(size_t)c] = clock++;
            stack.push_back({c, 0});
        } else {
            mask.exit[(size_t)f.node] = clock;
            stack.pop_back();
        }
    }
    return mask;
}

}  // namespace spdl
